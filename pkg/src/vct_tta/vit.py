"""Mini Vision Transformer with a replaceable first-layer class token.

The forward pass takes the class-token rows explicitly (one per sample), so
the source model, the adapted composite token and the oracle token all run
through the same code path.  Parameter lookups go through an ``overrides``
mapping, which is how adaptation and source training swap watched tensors in
for the stored arrays.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor
from .util import atomic_write_bytes

CKPT_MAGIC = b"VCTCKPT1"

# Fixed input standardisation applied by forward() to [0, 1] pixels.
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ConfigError(f"ViTConfig.{f.name} must be a positive integer, got {v!r}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"ViTConfig.patch_size={self.patch_size} does not divide image_size={self.image_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"ViTConfig.num_heads={self.num_heads} does not divide embed_dim={self.embed_dim}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def param_specs(cfg: ViTConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in checkpoint order."""
    d, k = cfg.embed_dim, cfg.num_classes
    h = d * cfg.mlp_ratio
    specs = [
        ("patch_embed.weight", (cfg.patch_dim, d)),
        ("patch_embed.bias", (d,)),
        ("pos_embed", (cfg.num_patches + 1, d)),
        ("cls_token", (d,)),
    ]
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        specs += [
            (p + "ln1.gamma", (d,)), (p + "ln1.beta", (d,)),
            (p + "attn.wq", (d, d)), (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)), (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)), (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
            (p + "ln2.gamma", (d,)), (p + "ln2.beta", (d,)),
            (p + "mlp.w1", (d, h)), (p + "mlp.b1", (h,)),
            (p + "mlp.w2", (h, d)), (p + "mlp.b2", (d,)),
        ]
    specs += [
        ("norm.gamma", (d,)), ("norm.beta", (d,)),
        ("head.weight", (d, k)), ("head.bias", (k,)),
    ]
    return specs


def layernorm_param_names(cfg: ViTConfig) -> list[str]:
    """Every layer-norm affine parameter (the adaptable weights besides tokens)."""
    return [name for name, _ in param_specs(cfg)
            if name.endswith(".gamma") or name.endswith(".beta")]


@dataclass
class ViTModel:
    config: ViTConfig
    params: dict[str, np.ndarray]

    @property
    def source_class_token(self) -> np.ndarray:
        return self.params["cls_token"]

    @property
    def dtype(self):
        return self.params["cls_token"].dtype

    def copy(self) -> ViTModel:
        return ViTModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> ViTModel:
        return ViTModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})


def init_model(cfg: ViTConfig, rng: np.random.Generator, dtype=nx.RUN_DTYPE) -> ViTModel:
    """Fresh weights: fan-in scaled normals, unit LN gains, random class token."""
    params = {}
    for name, shape in param_specs(cfg):
        if name.endswith(".gamma"):
            v = np.ones(shape)
        elif name.endswith(".beta") or name.split(".")[-1].startswith("b") or name.endswith(".bias"):
            v = np.zeros(shape)
        elif name in ("pos_embed", "cls_token"):
            v = rng.normal(0.0, 0.02, size=shape)
        else:
            v = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        params[name] = v.astype(dtype)
    return ViTModel(cfg, params)


# ---------------------------------------------------------------------------
# forward


def _getter(model: ViTModel, overrides: Mapping[str, Tensor] | None):
    if not overrides:
        return model.params.__getitem__
    return lambda name: overrides.get(name, model.params[name])


def patchify(cfg: ViTConfig, images: np.ndarray) -> np.ndarray:
    """B x C x H x W -> B x N x (C*p*p), patches in row-major grid order."""
    images = np.asarray(images)
    b = images.shape[0]
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise DimensionError(f"images must be B x {expected}, got {images.shape}")
    p = cfg.patch_size
    g = cfg.image_size // p
    x = images.reshape(b, cfg.channels, g, p, g, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, cfg.patch_dim)


def encode_patches(model: ViTModel, images, overrides=None) -> Tensor:
    """Linear patch projection plus positional embeddings of the patch slots."""
    get = _getter(model, overrides)
    cfg = model.config
    patches = patchify(cfg, images).astype(model.dtype, copy=False)
    x = nx.linear(patches, get("patch_embed.weight"), get("patch_embed.bias"))
    return nx.add(x, nx.narrow(get("pos_embed"), 1, cfg.num_patches + 1, axis=0))


def attention_layer(model: ViTModel, index: int, x, overrides=None) -> Tensor:
    """One pre-norm encoder block: x + MHSA(LN(x)), then + MLP(LN(.))."""
    get = _getter(model, overrides)
    cfg = model.config
    if not 0 <= index < cfg.num_layers:
        raise IndexError(f"layer index {index} outside 0..{cfg.num_layers - 1}")
    p = f"blocks.{index}."
    xv = x.data if isinstance(x, Tensor) else np.asarray(x)
    if xv.ndim != 3 or xv.shape[-1] != cfg.embed_dim:
        raise DimensionError(f"block input must be B x T x {cfg.embed_dim}, got {xv.shape}")
    b, t, d = xv.shape
    nh, hd = cfg.num_heads, cfg.head_dim

    h = nx.layernorm(x, get(p + "ln1.gamma"), get(p + "ln1.beta"))

    def heads(w, bias):
        y = nx.linear(h, get(w), get(bias))
        return nx.transpose(nx.reshape(y, (b, t, nh, hd)), (0, 2, 1, 3))

    q = heads(p + "attn.wq", p + "attn.bq")
    k = heads(p + "attn.wk", p + "attn.bk")
    v = heads(p + "attn.wv", p + "attn.bv")
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    attn = nx.softmax(scores, axis=-1)
    ctx = nx.reshape(nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    x = nx.add(x, nx.linear(ctx, get(p + "attn.wo"), get(p + "attn.bo")))

    h = nx.layernorm(x, get(p + "ln2.gamma"), get(p + "ln2.beta"))
    h = nx.gelu(nx.linear(h, get(p + "mlp.w1"), get(p + "mlp.b1")))
    return nx.add(x, nx.linear(h, get(p + "mlp.w2"), get(p + "mlp.b2")))


def forward(model: ViTModel, images, tokens, overrides=None) -> Tensor:
    """Logits (B x K) with ``tokens[n]`` as the first-layer class token of sample n.

    ``images`` are [0, 1] pixels; they are standardised before patch encoding.
    """
    get = _getter(model, overrides)
    cfg = model.config
    images = np.asarray(images)
    b = images.shape[0]
    tv = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    if tv.shape != (b, cfg.embed_dim):
        raise DimensionError(f"tokens must be {b} x {cfg.embed_dim}, got {tv.shape}")

    pixels = ((images - PIXEL_MEAN) / PIXEL_STD).astype(model.dtype, copy=False)
    patches = encode_patches(model, pixels, overrides)
    pos_cls = nx.take(get("pos_embed"), 0, axis=0)
    cls = nx.reshape(nx.add(tokens, pos_cls), (b, 1, cfg.embed_dim))
    x = nx.concat([cls, patches], axis=1)
    for i in range(cfg.num_layers):
        x = attention_layer(model, i, x, overrides)
    c_final = nx.take(x, 0, axis=1)
    c_final = nx.layernorm(c_final, get("norm.gamma"), get("norm.beta"))
    return nx.linear(c_final, get("head.weight"), get("head.bias"))


def source_tokens(model: ViTModel, batch_size: int) -> np.ndarray:
    return np.broadcast_to(model.source_class_token, (batch_size, model.config.embed_dim)).copy()


def predict_logits(model: ViTModel, images, batch_size: int = 256) -> np.ndarray:
    """Plain source inference (source class token, stored weights), chunked."""
    images = np.asarray(images)
    out = []
    for s in range(0, images.shape[0], batch_size):
        chunk = images[s:s + batch_size]
        out.append(forward(model, chunk, source_tokens(model, chunk.shape[0])).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.num_classes))


# ---------------------------------------------------------------------------
# checkpoint I/O
#
# Layout (little-endian):
#   8 bytes   magic "VCTCKPT1"
#   8 x u32   image_size, patch_size, channels, embed_dim, num_layers,
#             num_heads, mlp_ratio, num_classes
#   f32 ...   every parameter, flattened row-major, in param_specs() order
#   u32       CRC-32 of all preceding bytes


_CFG_FIELDS = [f.name for f in fields(ViTConfig)]


def checkpoint_bytes(model: ViTModel) -> bytes:
    cfg = model.config
    parts = [CKPT_MAGIC, struct.pack("<8I", *(getattr(cfg, f) for f in _CFG_FIELDS))]
    for name, shape in param_specs(cfg):
        arr = model.params[name]
        if arr.shape != shape:
            raise DimensionError(f"{name}: shape {arr.shape} != {shape}")
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(model: ViTModel, path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, checkpoint_bytes(model))
    return path


def load_checkpoint_bytes(raw: bytes, expected: ViTConfig | None = None) -> ViTModel:
    header = len(CKPT_MAGIC) + 4 * len(_CFG_FIELDS)
    if len(raw) < header + 4 or raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("not a VCT checkpoint (bad magic or truncated)")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    values = struct.unpack("<8I", raw[len(CKPT_MAGIC):header])
    cfg = ViTConfig(**dict(zip(_CFG_FIELDS, values)))
    if expected is not None and cfg != expected:
        diff = {k: (v, getattr(expected, k)) for k, v in asdict(cfg).items() if getattr(expected, k) != v}
        raise CheckpointError(f"checkpoint config does not match run config: {diff}")
    params, off = {}, header
    for name, shape in param_specs(cfg):
        n = int(np.prod(shape))
        end = off + 4 * n
        if end > len(payload):
            raise CheckpointError(f"checkpoint truncated at {name}")
        params[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off = end
    if off != len(payload):
        raise CheckpointError("trailing bytes after last parameter")
    return ViTModel(cfg, params)


def load_checkpoint(path, expected: ViTConfig | None = None) -> ViTModel:
    return load_checkpoint_bytes(Path(path).read_bytes(), expected)
