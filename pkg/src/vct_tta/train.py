"""Source-domain training of the mini-ViT, plus the label-supervised oracle token."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from . import vct, vit
from .loss import LossConfig
from .stream import Split
from .util import derive_rng

log = logging.getLogger(__name__)

MIN_SOURCE_ACCURACY = 0.80


class TrainingDiagnosticError(RuntimeError):
    """Source training finished far below the expected clean accuracy."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("TrainConfig.epochs must be >= 0")
        if self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("TrainConfig.batch_size and learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("TrainConfig.weight_decay must be >= 0")


def cross_entropy(logits, labels) -> nx.Tensor:
    """Mean negative log-softmax probability of the true class."""
    return nx.cross_entropy(logits, labels)


def accuracy(model: vit.ViTModel, split: Split) -> float:
    if len(split) == 0:
        return float("nan")
    pred = vit.predict_logits(model, split.images).argmax(axis=1)
    return float((pred == split.labels).mean())


def train_step(model: vit.ViTModel, images, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy loss and gradients for every parameter (all watched)."""
    with nx.GradTape() as tape:
        watched = {name: tape.watch(arr, name) for name, arr in model.params.items()}
        tokens = nx.broadcast_rows(watched["cls_token"], len(labels))
        logits = vit.forward(model, images, tokens, watched)
        loss = cross_entropy(logits, labels)
        grads = tape.backward(loss, list(watched.values()))
    return float(loss.data), dict(zip(watched, grads))


def train_source(
    model: vit.ViTModel,
    train: Split,
    cfg: TrainConfig,
    test: Split | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
    min_accuracy: float | None = MIN_SOURCE_ACCURACY,
) -> vit.ViTModel:
    """Plain fixed-rate mini-batch SGD on every parameter, class token included.

    Returns a trained copy; ``model`` is left untouched.  ``on_epoch`` receives
    (epoch, mean train loss, clean test accuracy).
    """
    model = model.copy()
    rng = derive_rng(cfg.seed, "train/shuffle")
    decay = {k for k in model.params if k.endswith(("weight", ".wq", ".wk", ".wv", ".wo", ".w1", ".w2"))}
    n = len(train)
    steps_per_epoch = max(1, n // cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            loss, grads = train_step(model, train.images[idx], train.labels[idx])
            losses.append(loss)
            for name, g in grads.items():
                if cfg.weight_decay and name in decay:
                    g = g + cfg.weight_decay * model.params[name]
                model.params[name] = (model.params[name] - cfg.learning_rate * g).astype(model.dtype)
        acc = accuracy(model, test) if test is not None else float("nan")
        log.info("epoch %d loss %.4f clean acc %.4f", epoch, float(np.mean(losses)), acc)
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(losses)), acc)
    if min_accuracy is not None and test is not None and cfg.epochs > 0:
        acc = accuracy(model, test)
        if acc < min_accuracy:
            raise TrainingDiagnosticError(
                f"clean test accuracy {acc:.3f} < {min_accuracy:.2f}; check learning_rate/epochs")
    return model


def oracle_step(model: vit.ViTModel, state, images, labels, watch) -> tuple[float, np.ndarray, np.ndarray, dict]:
    """Cross-entropy gradients for the watched tokens and layer-norm parameters."""
    tokens = {"C_L": state.c_l, "C_S": state.c_s}
    names = list(watch)
    with nx.GradTape() as tape:
        w = {n: tape.watch(tokens[n] if n in tokens else model.params[n], n) for n in names}
        rows = nx.add(w.get("C_L", state.c_l), w.get("C_S", state.c_s))
        overrides = {n: v for n, v in w.items() if n not in tokens}
        loss = cross_entropy(vit.forward(model, images, rows, overrides), labels)
        grads = dict(zip(names, tape.backward(loss, list(w.values()))))
    grad_l = grads.pop("C_L", np.zeros_like(state.c_l))
    grad_s = grads.pop("C_S", np.zeros_like(state.c_s))
    return float(loss.data), grad_l, grad_s, grads


def train_oracle_vct(model: vit.ViTModel, batches, mode="full", eta_l: float | None = None,
                     eta_s: float | None = None, ln_lr: float | None = None) -> list[np.ndarray]:
    """Label-supervised counterpart of the unsupervised token loop, for analysis only.

    Each labelled batch gets one plain cross-entropy step (no sharpness term,
    no reliability mask) on the same parameters the unsupervised ``mode``
    would adapt, at the same rates, followed by the same reset rule.  Returns
    the ``C_L`` snapshot after every batch.
    """
    mode = vct.AdaptMode(mode)
    eta_l = vct.DEFAULT_ETA_L if eta_l is None else eta_l
    eta_s = vct.DEFAULT_ETA_S if eta_s is None else eta_s
    ln_lr = LossConfig().ln_lr if ln_lr is None else ln_lr
    adapter = vct.Adapter(model, mode, eta_l, eta_s, LossConfig(ln_lr=ln_lr))
    state, work = adapter.state, adapter.model
    trajectory = []
    for batch in batches:
        state.begin_batch(len(batch), mode)
        watch = adapter.watched()
        if watch:
            _, grad_l, grad_s, grad_ln = oracle_step(work, state, batch.images, batch.labels, watch)
            vct.apply_gradients(state, grad_l, grad_s, mode)
            step = work.dtype.type(ln_lr)
            for name, g in grad_ln.items():
                work.params[name] = work.params[name] - step * g
        trajectory.append(state.c_l.copy())
        vct.reset_instance(state, mode)
    return trajectory
