"""Bi-level visual conditioning tokens and the per-batch adapt-then-predict loop.

The first-layer class token of sample ``n`` is ``C_L + C_S[n]``: ``C_L`` is a
domain token that starts at the source class token and persists across the
stream, ``C_S`` holds one instance token per sample that starts each batch at
zero and is cleared once the batch has been predicted.

A parameter is adapted only when the mode enables it *and* its learning rate
is positive.  A zero learning rate therefore removes that parameter from the
sharpness-aware perturbation as well, so e.g. ``Full`` with
``eta_l = eta_s = 0`` runs exactly the ``Baseline`` update.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

from . import vit
from .loss import LossConfig, entropy, reliable_mask, sam_step
from .numerics import DimensionError
from .stream import StreamBatch, UnlabeledBatch

DEFAULT_ETA_L = 0.005
DEFAULT_ETA_S = 0.01


class AdaptationError(RuntimeError):
    """Adaptation produced non-finite gradients or parameters."""


class AdaptMode(str, Enum):
    SOURCE_ONLY = "source_only"
    BASELINE = "baseline"
    DS_ONLY = "ds_only"
    IS_ONLY = "is_only"
    FULL_NO_RESET = "full_no_reset"
    FULL = "full"

    @property
    def adapts(self) -> bool:
        return self is not AdaptMode.SOURCE_ONLY

    @property
    def learns_domain(self) -> bool:
        return self in (AdaptMode.DS_ONLY, AdaptMode.FULL, AdaptMode.FULL_NO_RESET)

    @property
    def learns_instance(self) -> bool:
        return self in (AdaptMode.IS_ONLY, AdaptMode.FULL, AdaptMode.FULL_NO_RESET)

    @property
    def resets(self) -> bool:
        return self is not AdaptMode.FULL_NO_RESET

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    AdaptMode.SOURCE_ONLY: "Source",
    AdaptMode.BASELINE: "Baseline (entropy+SAM, LN affines)",
    AdaptMode.DS_ONLY: "+ Domain-specific token",
    AdaptMode.IS_ONLY: "+ Instance-specific token",
    AdaptMode.FULL_NO_RESET: "Full without reset",
    AdaptMode.FULL: "Full (bi-level, reset)",
}

# Table order for ablations.
ABLATION_ORDER = (
    AdaptMode.SOURCE_ONLY, AdaptMode.BASELINE, AdaptMode.DS_ONLY,
    AdaptMode.IS_ONLY, AdaptMode.FULL_NO_RESET, AdaptMode.FULL,
)


@dataclass
class VCTState:
    c_l: np.ndarray
    c_s: np.ndarray
    eta_l: float = DEFAULT_ETA_L
    eta_s: float = DEFAULT_ETA_S
    grad_l: np.ndarray | None = None
    grad_s: np.ndarray | None = None

    def __post_init__(self):
        if self.eta_l < 0 or self.eta_s < 0:
            raise ValueError("token learning rates must be >= 0")
        if self.grad_l is None:
            self.grad_l = np.zeros_like(self.c_l)
        if self.grad_s is None:
            self.grad_s = np.zeros_like(self.c_s)

    @classmethod
    def from_model(cls, model: vit.ViTModel, eta_l: float = DEFAULT_ETA_L, eta_s: float = DEFAULT_ETA_S) -> VCTState:
        c_l = model.source_class_token.copy()
        return cls(c_l, np.zeros((0, c_l.shape[0]), dtype=c_l.dtype), eta_l, eta_s)

    @property
    def dim(self) -> int:
        return self.c_l.shape[0]

    def begin_batch(self, batch_size: int, mode: AdaptMode) -> None:
        """Size ``C_S`` for a batch of ``batch_size`` samples.

        In reset modes the rows are fresh zeros.  Without reset the previous
        rows carry over, reused cyclically when the row count changes.
        """
        rows = self.c_s.shape[0]
        if mode.resets or rows == 0:
            if mode.resets and np.any(self.c_s):
                raise AdaptationError("instance tokens were not reset before a new batch")
            self.c_s = np.zeros((batch_size, self.dim), dtype=self.c_l.dtype)
            self.grad_s = np.zeros_like(self.c_s)
        elif rows != batch_size:
            idx = np.arange(batch_size) % rows
            self.c_s = self.c_s[idx].copy()
            self.grad_s = self.grad_s[idx].copy()


def compose(state: VCTState, batch_size: int) -> np.ndarray:
    """Class-token rows ``C_L + C_S[n]`` for a batch of ``batch_size``."""
    if state.c_s.shape != (batch_size, state.dim):
        raise DimensionError(f"C_S has shape {state.c_s.shape}, expected ({batch_size}, {state.dim})")
    return state.c_l[None, :] + state.c_s


def apply_gradients(state: VCTState, grad_l: np.ndarray, grad_s: np.ndarray,
                    mode: AdaptMode = AdaptMode.FULL) -> VCTState:
    """One plain gradient step on each token at its own rate (in place)."""
    if grad_l.shape != state.c_l.shape or grad_s.shape != state.c_s.shape:
        raise DimensionError(
            f"gradient shapes {grad_l.shape}, {grad_s.shape} do not match "
            f"{state.c_l.shape}, {state.c_s.shape}")
    if not (np.all(np.isfinite(grad_l)) and np.all(np.isfinite(grad_s))):
        raise AdaptationError("non-finite token gradient; aborting run")
    if mode.learns_domain:
        state.grad_l = grad_l
        state.c_l = state.c_l - state.c_l.dtype.type(state.eta_l) * grad_l
    if mode.learns_instance:
        state.grad_s = grad_s
        state.c_s = state.c_s - state.c_s.dtype.type(state.eta_s) * grad_s
    return state


def reset_instance(state: VCTState, mode: AdaptMode = AdaptMode.FULL) -> VCTState:
    """Zero ``C_S`` and its gradient; a no-op in ``FULL_NO_RESET``."""
    if mode.resets:
        state.c_s = np.zeros_like(state.c_s)
        state.grad_s = np.zeros_like(state.grad_s)
    return state


@dataclass
class RunRecord:
    batch_index: int
    predictions: np.ndarray
    mean_entropy: float
    pass_rate: float
    updated: bool
    wall_time: float
    token_cl: np.ndarray = field(repr=False)
    token_composed_mean: np.ndarray = field(repr=False)
    accuracy: float | None = None

    @property
    def batch_size(self) -> int:
        return len(self.predictions)


class Adapter:
    """Owns one adaptation run: a working model copy plus the token state.

    The source model passed in is never modified.  Only ``UnlabeledBatch``
    objects are accepted, so labels cannot reach the update.
    """

    def __init__(self, model: vit.ViTModel, mode: AdaptMode | str = AdaptMode.FULL,
                 eta_l: float = DEFAULT_ETA_L, eta_s: float = DEFAULT_ETA_S,
                 loss_cfg: LossConfig | None = None, trace: list | None = None):
        self.mode = AdaptMode(mode)
        self.source = model
        self.model = model.copy()
        self.state = VCTState.from_model(model, eta_l, eta_s)
        self.loss_cfg = loss_cfg or LossConfig()
        self.trace = trace

    def _event(self, name: str) -> None:
        if self.trace is not None:
            self.trace.append(name)

    def watched(self) -> list[str]:
        names = []
        if self.mode.learns_domain and self.state.eta_l > 0:
            names.append("C_L")
        if self.mode.learns_instance and self.state.eta_s > 0:
            names.append("C_S")
        if self.mode.adapts and self.loss_cfg.ln_lr > 0:
            names += vit.layernorm_param_names(self.model.config)
        return names

    def adapt_batch(self, batch: UnlabeledBatch) -> tuple[np.ndarray, RunRecord]:
        if not isinstance(batch, UnlabeledBatch):
            raise TypeError("adapt_batch takes an UnlabeledBatch; call StreamBatch.unlabeled()")
        start = time.perf_counter()
        state, b = self.state, len(batch)
        state.begin_batch(b, self.mode)
        self._event("begin")

        watch = self.watched()
        updated = False
        if watch:
            grad_l, grad_s, grad_ln, info = sam_step(self.model, state, batch.images, self.loss_cfg, watch)
            self._event("gradient")
            entropies, mask = info["entropies"], info["mask"]
            if mask.any():
                apply_gradients(state, grad_l, grad_s, self.mode)
                lr = self.model.dtype.type(self.loss_cfg.ln_lr)
                for name, g in grad_ln.items():
                    if not np.all(np.isfinite(g)):
                        raise AdaptationError(f"non-finite gradient for {name}")
                    self.model.params[name] = self.model.params[name] - lr * g
                updated = True
                self._event("update")
        else:
            entropies = mask = None

        logits = vit.forward(self.model, batch.images, compose(state, b)).data
        predictions = logits.argmax(axis=1)
        self._event("predict")
        if entropies is None:
            entropies = entropy(logits).data
            mask = reliable_mask(entropies, self.loss_cfg.threshold(self.model.config.num_classes))

        record = RunRecord(
            batch_index=batch.batch_index,
            predictions=predictions,
            mean_entropy=float(np.mean(entropies)),
            pass_rate=float(np.mean(mask)),
            updated=updated,
            wall_time=time.perf_counter() - start,
            token_cl=state.c_l.copy(),
            token_composed_mean=compose(state, b).mean(axis=0),
        )
        reset_instance(state, self.mode)
        self._event("reset")
        return predictions, record


def adapt_batch(adapter: Adapter, batch: UnlabeledBatch) -> tuple[np.ndarray, RunRecord]:
    return adapter.adapt_batch(batch)


def score(record: RunRecord, labels: np.ndarray) -> RunRecord:
    record.accuracy = float(np.mean(record.predictions == labels))
    return record


def run_stream(model: vit.ViTModel, batches: Iterable[StreamBatch], mode: AdaptMode | str,
               eta_l: float = DEFAULT_ETA_L, eta_s: float = DEFAULT_ETA_S,
               loss_cfg: LossConfig | None = None) -> list[RunRecord]:
    """Adapt over a whole stream; labels are only used to score each record."""
    adapter = Adapter(model, mode, eta_l, eta_s, loss_cfg)
    records = []
    for batch in batches:
        _, rec = adapter.adapt_batch(batch.unlabeled())
        records.append(score(rec, batch.labels))
    return records


def stream_accuracy(records: list[RunRecord]) -> float:
    """Sample-weighted top-1 accuracy over a stream."""
    correct = sum(r.accuracy * r.batch_size for r in records)
    total = sum(r.batch_size for r in records)
    return correct / total if total else float("nan")
