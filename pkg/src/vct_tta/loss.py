"""Test-time objective: entropy, reliable-sample mask and sharpness-aware gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import numerics as nx
from . import vit
from .numerics import Tensor

SAM_EPS = 1e-12
DEFAULT_E0_FRACTION = 0.4


@dataclass(frozen=True)
class LossConfig:
    """``entropy_threshold=None`` means ``0.4 * ln(num_classes)``."""

    entropy_threshold: float | None = None
    sam_rho: float = 0.05
    ln_lr: float = 0.001

    def __post_init__(self):
        if self.entropy_threshold is not None and not self.entropy_threshold > 0:
            raise ValueError("LossConfig.entropy_threshold must be > 0")
        if not self.sam_rho >= 0:
            raise ValueError("LossConfig.sam_rho must be >= 0")
        if not self.ln_lr >= 0:
            raise ValueError("LossConfig.ln_lr must be >= 0")

    def threshold(self, num_classes: int) -> float:
        if self.entropy_threshold is not None:
            return float(self.entropy_threshold)
        return DEFAULT_E0_FRACTION * math.log(num_classes)


def entropy(logits) -> Tensor:
    """Per-sample Shannon entropy (nats) of the softmax of ``logits``."""
    return nx.entropy(logits)


def reliable_mask(entropies, threshold: float) -> np.ndarray:
    """True where a sample's entropy is strictly below ``threshold``."""
    h = entropies.data if isinstance(entropies, Tensor) else np.asarray(entropies)
    return h < threshold


def masked_loss(logits, mask) -> Tensor:
    """Mean entropy over the masked-in samples; an untracked zero if none pass."""
    mask = np.asarray(mask, dtype=bool)
    lv = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if mask.shape != (lv.shape[0],):
        raise nx.DimensionError(f"mask shape {mask.shape} does not match {lv.shape[0]} samples")
    count = int(mask.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=lv.dtype))
    weights = (mask / count).astype(lv.dtype)
    return nx.op_sum(nx.mul(entropy(logits), weights))


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def sharpness_aware_grads(
    objective: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    rho: float,
) -> tuple[dict[str, np.ndarray], dict]:
    """Two-pass SAM gradient of ``objective`` over ``params``.

    Pass 1 takes the gradient g at the current point.  Pass 2 evaluates the
    gradient at ``params + rho * g / (||g|| + eps)``, with ||g|| the L2 norm over
    all parameters jointly.  ``params`` is never written to: the perturbed
    point is built from fresh arrays, so the caller's values stay bit-identical.

    Returns the gradients plus ``{"loss", "grad_norm", "perturbed"}``.
    """
    names = list(params)
    base, loss = _grads_at(objective, params, names)
    info = {"loss": loss, "grad_norm": global_norm(base), "perturbed": False}
    if rho == 0 or info["grad_norm"] == 0.0 or not names:
        return base, info
    step = rho / (info["grad_norm"] + SAM_EPS)
    shifted = {n: (params[n] + step * base[n]).astype(params[n].dtype) for n in names}
    grads, _ = _grads_at(objective, shifted, names)
    info["perturbed"] = True
    return grads, info


def _grads_at(objective, params, names) -> tuple[dict[str, np.ndarray], float]:
    with nx.GradTape() as tape:
        watched = {n: tape.watch(params[n], n) for n in names}
        loss = objective(watched)
        grads = tape.backward(loss, [watched[n] for n in names])
    value = float(loss.data) if isinstance(loss, Tensor) else float(loss)
    return dict(zip(names, grads)), value


def sam_step(model, state, images, cfg: LossConfig, watch) -> tuple[np.ndarray, np.ndarray, dict, dict]:
    """Sharpness-aware gradients of the masked entropy for one batch.

    ``watch`` names the adapted parameters: ``"C_L"``, ``"C_S"`` and/or
    layer-norm parameter names of ``model``.  Unwatched entries come back as
    zeros.  The reliability mask is fixed by the unperturbed pass and reused
    at the perturbed point.  ``info`` carries ``entropies`` and ``mask`` from
    the first pass along with the SAM diagnostics.
    """
    images = np.asarray(images)
    k = model.config.num_classes
    threshold = cfg.threshold(k)
    values = {"C_L": state.c_l, "C_S": state.c_s}
    params = {n: (values[n] if n in values else model.params[n]) for n in watch}
    first: dict = {}

    def objective(p):
        c_l = p.get("C_L", state.c_l)
        c_s = p.get("C_S", state.c_s)
        tokens = nx.add(c_l, c_s)
        overrides = {n: v for n, v in p.items() if n not in values}
        logits = vit.forward(model, images, tokens, overrides)
        if "mask" not in first:
            h = entropy(logits.data)
            first["entropies"] = h.data
            first["mask"] = reliable_mask(h, threshold)
        return masked_loss(logits, first["mask"])

    if params:
        grads, info = sharpness_aware_grads(objective, params, cfg.sam_rho)
    else:
        objective({})
        grads, info = {}, {"loss": 0.0, "grad_norm": 0.0, "perturbed": False}
    info.update(first)
    grad_l = grads.get("C_L", np.zeros_like(state.c_l))
    grad_s = grads.get("C_S", np.zeros_like(state.c_s))
    grad_ln = {n: g for n, g in grads.items() if n not in values}
    return grad_l, grad_s, grad_ln, info
