import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vct_tta import vit

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        hi = f(x.copy())
        x[i] = old - h
        lo = f(x.copy())
        x[i] = old
        g[i] = (hi - lo) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


TOY = vit.ViTConfig(image_size=8, patch_size=4, channels=3, embed_dim=16, num_layers=2,
                    num_heads=2, mlp_ratio=2, num_classes=5)


def toy_model(seed: int = 0, dtype=np.float64, token_scale: float = 1.0) -> vit.ViTModel:
    """Small float64 model with non-trivial LN affines and an O(1) class token."""
    rng = np.random.default_rng(seed)
    m = vit.init_model(TOY, rng, dtype)
    for name in vit.layernorm_param_names(TOY):
        base = 1.0 if name.endswith("gamma") else 0.0
        m.params[name] = (base + 0.2 * rng.normal(size=m.params[name].shape)).astype(dtype)
    m.params["cls_token"] = (token_scale * rng.normal(size=TOY.embed_dim)).astype(dtype)
    m.params["pos_embed"] = (0.3 * rng.normal(size=m.params["pos_embed"].shape)).astype(dtype)
    return m


def toy_images(n: int, seed: int = 1) -> np.ndarray:
    return np.random.default_rng(seed).random((n, TOY.channels, TOY.image_size, TOY.image_size))


@pytest.fixture
def model():
    return toy_model()


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Default desk config trained once per session via the CLI pipeline."""
    from vct_tta import cli, config

    cfg = config.RunConfig()
    log = []
    model, acc = cli.train_model(cfg, lambda e, l, a: log.append((e, l, a)))
    path = vit.save_checkpoint(model, tmp_path_factory.mktemp("ckpt") / "source.ckpt")
    return {"cfg": cfg, "model": vit.load_checkpoint(path), "accuracy": acc, "log": log, "path": path}


@pytest.fixture(scope="session")
def test_split():
    from vct_tta import stream

    return stream.generate_dataset(stream.DatasetSpec())[1]
