"""Synthetic source/target data, corruption operators and test-stream schedulers.

Images are float arrays in [0, 1] with layout B x C x H x W.  A class is a
grating orientation; every sample draws its own colour, frequency, phase,
amplitude, brightness and a small amount of sensor noise.

Severity tables (index = severity 1..5):

=============  ============================================  =====================
kind           parameter                                     values
=============  ============================================  =====================
gaussian_noise additive noise sigma                          .08 .12 .18 .26 .38
shot_noise     Poisson photon count scale (lower = noisier)  60 25 12 5 3
impulse_noise  salt-and-pepper fraction                      .03 .06 .09 .17 .27
blur           Gaussian blur sigma (pixels)                  .6 .9 1.2 1.6 2.2
contrast       contrast factor around image mean             .6 .45 .3 .2 .12
pixelate       side length of the box-downsampled grid       24 18 14 10 8
=============  ============================================  =====================
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .util import csv_text, derive_rng, atomic_write_text

CORRUPTION_KINDS = ("gaussian_noise", "shot_noise", "impulse_noise", "blur", "contrast", "pixelate")
PROTOCOLS = ("normal", "imbalanced", "bs1")

SEVERITY_TABLE: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.08, 0.12, 0.18, 0.26, 0.38),
    "shot_noise": (60, 25, 12, 5, 3),
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),
    "blur": (0.6, 0.9, 1.2, 1.6, 2.2),
    "contrast": (0.6, 0.45, 0.3, 0.2, 0.12),
    "pixelate": (24, 18, 14, 10, 8),
}

# Minimum share of the dominant class in every imbalanced batch.
DOMINANT_FRACTION = 0.85


class StreamConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 10
    samples_per_class: int = 320
    test_samples_per_class: int = 320
    image_size: int = 32
    channels: int = 3
    generator_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise StreamConfigError("DatasetSpec.num_classes must be >= 2")
        for name in ("samples_per_class", "test_samples_per_class", "image_size", "channels"):
            if getattr(self, name) <= 0:
                raise StreamConfigError(f"DatasetSpec.{name} must be positive")


@dataclass
class Split:
    images: np.ndarray  # N x C x H x W, float32 in [0, 1]
    labels: np.ndarray  # N, int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> Split:
        return Split(self.images[idx], self.labels[idx])


@dataclass(frozen=True)
class Corruption:
    kind: str
    severity: int
    corruption_seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise StreamConfigError(f"unknown corruption kind {self.kind!r}; expected one of {CORRUPTION_KINDS}")
        if not 0 <= self.severity <= 5:
            raise StreamConfigError(f"corruption severity must be in 1..5, got {self.severity}")


@dataclass(frozen=True)
class UnlabeledBatch:
    """What the adaptation code sees: images and bookkeeping, never labels."""

    images: np.ndarray
    batch_index: int
    protocol: str

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class StreamBatch:
    images: np.ndarray
    labels: np.ndarray = field(repr=False)
    batch_index: int
    protocol: str
    sample_ids: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    def unlabeled(self) -> UnlabeledBatch:
        return UnlabeledBatch(self.images, self.batch_index, self.protocol)


# ---------------------------------------------------------------------------
# dataset


def _class_templates(spec: DatasetSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    k = spec.num_classes
    # Classes differ only by grating orientation; colour and frequency are
    # drawn from the same distribution for every class, so broadband noise
    # lowers all class margins alike instead of mimicking one template.
    orient = np.pi * np.arange(k) / k + rng.uniform(0, np.pi / (4 * k))
    return {"orient": orient}


def _render(labels: np.ndarray, tmpl: dict, spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    n, s = len(labels), spec.image_size
    coords = (np.arange(s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    theta = tmpl["orient"][labels] + rng.normal(0, 0.04, n)
    freq = rng.uniform(2.5, 3.5, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    amp = rng.uniform(0.15, 0.3, n)
    base = rng.uniform(0.4, 0.6, n)
    color = rng.uniform(0.4, 1.0, (n, spec.channels))
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    grating = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    img = base[:, None, None, None] + amp[:, None, None, None] * grating[:, None] * color[:, :, None, None]
    # Per-image sensor noise level; the source domain is never perfectly clean.
    sigma = rng.uniform(0.0, 0.1, n)
    img += rng.normal(0, 1.0, img.shape) * sigma[:, None, None, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_dataset(spec: DatasetSpec) -> tuple[Split, Split]:
    """Deterministic (train, test) splits with exactly uniform label histograms."""
    tmpl = _class_templates(spec, derive_rng(spec.generator_seed, "data/templates"))
    splits = []
    for name, per_class in (("train", spec.samples_per_class), ("test", spec.test_samples_per_class)):
        rng = derive_rng(spec.generator_seed, f"data/{name}")
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        labels = labels[rng.permutation(len(labels))]
        splits.append(Split(_render(labels, tmpl, spec, rng), labels.astype(np.int64)))
    return splits[0], splits[1]


def load_binary_dataset(path, image_size: int = 32, channels: int = 3) -> Split:
    """Read fixed-size records of ``label byte + C*H*W pixel bytes`` (CHW order)."""
    raw = np.fromfile(Path(path), dtype=np.uint8)
    rec = 1 + channels * image_size * image_size
    if raw.size % rec:
        raise StreamConfigError(f"{path}: size {raw.size} is not a multiple of record size {rec}")
    raw = raw.reshape(-1, rec)
    images = raw[:, 1:].reshape(-1, channels, image_size, image_size).astype(np.float32) / 255.0
    return Split(images, raw[:, 0].astype(np.int64))


def save_binary_dataset(split: Split, path) -> None:
    pixels = np.clip(np.rint(split.images * 255.0), 0, 255).astype(np.uint8)
    labels = split.labels.astype(np.uint8)[:, None]
    recs = np.concatenate([labels, pixels.reshape(len(split), -1)], axis=1)
    Path(path).write_bytes(recs.tobytes())


# ---------------------------------------------------------------------------
# corruptions


def _box_pixelate(images: np.ndarray, side: int) -> np.ndarray:
    h = images.shape[-1]
    cell = (np.arange(h) * side) // h
    # Average inside each (uneven) cell, then paint the cell mean back.
    onehot = np.zeros((side, h), dtype=np.float64)
    onehot[cell, np.arange(h)] = 1.0
    onehot /= onehot.sum(axis=1, keepdims=True)
    small = np.einsum("ih,bchw,jw->bcij", onehot, images, onehot)
    return small[:, :, cell][:, :, :, cell]


def corrupt(images: np.ndarray, c: Corruption) -> np.ndarray:
    """Apply one corruption; output clamped to [0, 1]. Pure in (images, c)."""
    x = np.asarray(images, dtype=np.float64)
    if c.severity == 0:
        return np.asarray(images, dtype=np.float32).copy()
    p = SEVERITY_TABLE[c.kind][c.severity - 1]
    rng = np.random.default_rng(c.corruption_seed)
    if c.kind == "gaussian_noise":
        out = x + rng.normal(0.0, p, x.shape)
    elif c.kind == "shot_noise":
        out = rng.poisson(x * p) / p
    elif c.kind == "impulse_noise":
        u = rng.random(x.shape)
        out = x.copy()
        out[u < p / 2] = 0.0
        out[(u >= p / 2) & (u < p)] = 1.0
    elif c.kind == "blur":
        out = gaussian_filter(x, sigma=(0, 0, p, p), mode="reflect")
    elif c.kind == "contrast":
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        out = (x - mean) * p + mean
    elif c.kind == "pixelate":
        out = _box_pixelate(x, int(p))
    else:  # pragma: no cover - guarded by Corruption.__post_init__
        raise StreamConfigError(c.kind)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def distortion(clean: np.ndarray, corrupted: np.ndarray) -> float:
    """Mean per-pixel L2 distance (over channels) between two image stacks."""
    diff = np.asarray(corrupted, np.float64) - np.asarray(clean, np.float64)
    return float(np.sqrt((diff ** 2).sum(axis=1)).mean())


# ---------------------------------------------------------------------------
# scheduling


def _normal_order(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(n)


def _imbalanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    classes = np.unique(labels)
    queues = {c: list(rng.permutation(np.flatnonzero(labels == c))) for c in classes}
    order = list(rng.permutation(classes))
    n_dom = int(np.ceil(DOMINANT_FRACTION * batch_size))
    batches, j = [], 0
    while True:
        dom = order[j % len(order)]
        others = [c for c in order if c != dom]
        if len(queues[dom]) < n_dom:
            # Rotate to the next class that can still fill a dominant share.
            candidates = [c for c in order if len(queues[c]) >= n_dom]
            if not candidates:
                break
            dom = candidates[0]
            others = [c for c in order if c != dom]
        idx = [queues[dom].pop() for _ in range(n_dom)]
        k = 0
        while len(idx) < batch_size:
            live = [c for c in others if queues[c]]
            if not live:
                live = [dom] if queues[dom] else []
            if not live:
                break
            c = live[k % len(live)]
            idx.append(queues[c].pop())
            k += 1
        if len(idx) < batch_size:
            break
        batches.append(np.array(idx))
        j += 1
    return batches


def schedule(split: Split, protocol: str, batch_size: int, seed: int) -> list[StreamBatch]:
    """Order ``split`` into a stream of batches for one test protocol.

    ``normal`` shuffles i.i.d.; ``imbalanced`` gives each batch a dominant class
    holding at least ``DOMINANT_FRACTION`` of it, rotating the dominant class
    from batch to batch; ``bs1`` is the normal order with one sample per batch.
    """
    if protocol not in PROTOCOLS:
        raise StreamConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if protocol == "bs1":
        batch_size = 1
    if batch_size <= 0 or batch_size > len(split):
        raise StreamConfigError(f"batch_size={batch_size} must be in 1..{len(split)}")
    rng = derive_rng(seed, f"schedule/{protocol}")
    if protocol == "imbalanced":
        groups = _imbalanced_batches(split.labels, batch_size, rng)
    else:
        order = _normal_order(len(split), rng)
        groups = [order[s:s + batch_size] for s in range(0, len(order), batch_size)]
    return [StreamBatch(split.images[g], split.labels[g], j, protocol, np.asarray(g))
            for j, g in enumerate(groups)]


def label_entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def manifest_csv(batches: list[StreamBatch]) -> str:
    rows = [(b.batch_index, " ".join(map(str, b.sample_ids)), " ".join(map(str, b.labels))) for b in batches]
    return csv_text(("batch_index", "sample_ids", "labels"), rows)


def write_manifest(batches: list[StreamBatch], path) -> None:
    atomic_write_text(path, manifest_csv(batches))
