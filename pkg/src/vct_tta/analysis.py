"""Post-run diagnostics: cosine similarity to the oracle token, PCA of token
trajectories and learning-rate sensitivity sweeps.

Every report is a list of plain rows that ``util.write_csv`` turns into a
deterministic CSV.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import vct, vit
from .loss import LossConfig
from .stream import StreamBatch

SIMILARITY_MODES = (vct.AdaptMode.FULL, vct.AdaptMode.FULL_NO_RESET, vct.AdaptMode.DS_ONLY,
                    vct.AdaptMode.SOURCE_ONLY)
DEFAULT_WINDOW = 10


class AnalysisInputError(ValueError):
    """Inputs to an analysis routine are inconsistent or degenerate."""


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise AnalysisInputError(f"vector shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise AnalysisInputError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def pca_project(snapshots: Sequence[np.ndarray], dims: int = 2) -> np.ndarray:
    """Coordinates of each snapshot on the top ``dims`` principal components.

    Components come in descending eigenvalue order.  Each component's sign is
    chosen so that its largest-magnitude loading is positive.  When the
    centred data has rank below ``dims`` the missing columns are zero.
    """
    x = np.asarray(snapshots, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise AnalysisInputError("pca_project needs at least 3 snapshots of equal dimension")
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = max(evals[0], 0.0) * 1e-12 * x.shape[1] if evals.size else 0.0
    out = np.zeros((x.shape[0], dims))
    for j in range(min(dims, evecs.shape[1])):
        if evals[j] <= tol:
            break
        v = evecs[:, j]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, j] = centred @ v
    return out


def explained_fraction(snapshots: Sequence[np.ndarray], dims: int = 2) -> float:
    x = np.asarray(snapshots, dtype=np.float64)
    centred = x - x.mean(axis=0)
    evals = np.clip(np.linalg.eigvalsh(centred.T @ centred), 0.0, None)[::-1]
    total = evals.sum()
    return float(evals[:dims].sum() / total) if total > 0 else 1.0


@dataclass
class TrajectorySet:
    """Per-domain ``C_L`` snapshots keyed by domain label, with run metadata."""

    trajectories: dict[str, list[tuple[int, np.ndarray]]] = field(default_factory=dict)
    metadata: dict[str, dict] = field(default_factory=dict)

    def add(self, key: str, batch_index: int, snapshot, **meta) -> None:
        snapshot = np.asarray(snapshot)
        track = self.trajectories.setdefault(key, [])
        dim = self.dim
        if dim is not None and snapshot.shape != (dim,):
            raise AnalysisInputError(f"snapshot of shape {snapshot.shape} in a set of dimension {dim}")
        if track and batch_index <= track[-1][0]:
            raise AnalysisInputError(f"batch indices for {key!r} must be strictly increasing")
        track.append((int(batch_index), snapshot.copy()))
        if meta:
            self.metadata.setdefault(key, {}).update(meta)

    @property
    def dim(self) -> int | None:
        for track in self.trajectories.values():
            if track:
                return track[0][1].shape[0]
        return None

    def projection_rows(self) -> list[list]:
        """PCA over all snapshots jointly, one row per snapshot."""
        keys = [(d, i) for d, track in self.trajectories.items() for i, _ in track]
        snaps = [s for track in self.trajectories.values() for _, s in track]
        coords = pca_project(snaps)
        return [[d, i, c[0], c[1]] for (d, i), c in zip(keys, coords)]


PCA_HEADER = ["domain", "batch_index", "pc1", "pc2"]


def similarity_curves(tracks: dict[str, Sequence[np.ndarray]], oracle: Sequence[np.ndarray]) -> dict[str, np.ndarray]:
    n = len(oracle)
    curves = {}
    for name, track in tracks.items():
        if len(track) != n:
            raise AnalysisInputError(f"trajectory {name!r} has {len(track)} snapshots, oracle has {n}")
        curves[name] = np.array([cosine_similarity(t, o) for t, o in zip(track, oracle)])
    return curves


def window_stats(curve: np.ndarray, window: int = DEFAULT_WINDOW) -> tuple[float, float]:
    tail = np.asarray(curve)[-window:]
    return float(tail.mean()), float(tail.var())


def similarity_report(tracks: dict[str, Sequence[np.ndarray]], oracle: Sequence[np.ndarray],
                      window: int = DEFAULT_WINDOW) -> tuple[list[list], list[list]]:
    """Per-batch similarity rows and final-window summary rows.

    ``tracks`` maps configuration names to per-batch effective tokens
    (``C_L``).  The ``Source`` configuration is just the constant source token
    repeated.
    """
    curves = similarity_curves(tracks, oracle)
    per_batch = [[name, i, v] for name, curve in curves.items() for i, v in enumerate(curve)]
    summary = [[name, *window_stats(curve, window)] for name, curve in curves.items()]
    return per_batch, summary


SIMILARITY_HEADER = ["config", "batch_index", "cosine"]
SIMILARITY_SUMMARY_HEADER = ["config", "final_window_mean", "final_window_variance"]


def collect_tracks(model: vit.ViTModel, batches: Sequence[StreamBatch],
                   modes=SIMILARITY_MODES, eta_l: float = vct.DEFAULT_ETA_L,
                   eta_s: float = vct.DEFAULT_ETA_S, loss_cfg: LossConfig | None = None) -> dict[str, list[np.ndarray]]:
    tracks = {}
    for mode in modes:
        records = vct.run_stream(model, batches, mode, eta_l, eta_s, loss_cfg)
        tracks[vct.AdaptMode(mode).value] = [r.token_cl for r in records]
    return tracks


def default_grid(points: int = 7) -> np.ndarray:
    return np.logspace(-4, -1, points)


def sensitivity_sweep(run: Callable[[float, float], float], grid: Sequence[float] | None = None,
                      eta_l: float = vct.DEFAULT_ETA_L, eta_s: float = vct.DEFAULT_ETA_S) -> list[list]:
    """Accuracy over a one-axis-at-a-time learning-rate grid.

    ``run(eta_l, eta_s)`` returns the stream accuracy.  Varying one rate keeps
    the other at its default.  A final ``(0, 0)`` row is always included.
    """
    grid = default_grid() if grid is None else grid
    rows = []
    for value in grid:
        rows.append(["eta_l", float(value), eta_s, run(float(value), eta_s)])
    for value in grid:
        rows.append(["eta_s", eta_l, float(value), run(eta_l, float(value))])
    rows.append(["zero", 0.0, 0.0, run(0.0, 0.0)])
    return rows


SWEEP_HEADER = ["axis", "eta_l", "eta_s", "accuracy"]


def stream_runner(model: vit.ViTModel, batches: Sequence[StreamBatch], mode=vct.AdaptMode.FULL,
                  loss_cfg: LossConfig | None = None) -> Callable[[float, float], float]:
    def run(eta_l: float, eta_s: float) -> float:
        return vct.stream_accuracy(vct.run_stream(model, batches, mode, eta_l, eta_s, loss_cfg))
    return run
