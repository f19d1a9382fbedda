import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vct_tta import stream
from vct_tta.stream import Corruption, DatasetSpec, Split

SMALL = DatasetSpec(samples_per_class=2, test_samples_per_class=8)

# Mean per-pixel L2 distortion on the SMALL test split, corruption_seed 0,
# measured once and frozen.
FROZEN_DISTORTION = {
    "gaussian_noise": (0.127694, 0.190951, 0.282059, 0.388829, 0.508599),
    "shot_noise": (0.143929, 0.221254, 0.310556, 0.452463, 0.553628),
    "impulse_noise": (0.043865, 0.086714, 0.128943, 0.233262, 0.347609),
    "blur": (0.049522, 0.072893, 0.086631, 0.104332, 0.131732),
    "contrast": (0.081246, 0.111714, 0.142181, 0.162493, 0.178742),
    "pixelate": (0.057524, 0.083738, 0.099110, 0.118471, 0.133774),
}


@pytest.fixture(scope="module")
def probe():
    return stream.generate_dataset(SMALL)[1]


def test_dataset_is_deterministic_and_balanced():
    tr1, te1 = stream.generate_dataset(SMALL)
    tr2, te2 = stream.generate_dataset(SMALL)
    assert tr1.images.tobytes() == tr2.images.tobytes() and np.array_equal(te1.labels, te2.labels)
    assert np.all(np.bincount(tr1.labels) == 2) and np.all(np.bincount(te1.labels) == 8)
    assert tr1.images.dtype == np.float32 and tr1.images.min() >= 0 and tr1.images.max() <= 1
    assert tr1.images.shape == (20, 3, 32, 32)
    other = stream.generate_dataset(DatasetSpec(samples_per_class=2, test_samples_per_class=8, generator_seed=1))[0]
    assert other.images.tobytes() != tr1.images.tobytes()


def test_dataset_spec_validation():
    with pytest.raises(stream.StreamConfigError, match="num_classes"):
        DatasetSpec(num_classes=1)
    with pytest.raises(stream.StreamConfigError, match="image_size"):
        DatasetSpec(image_size=0)


@pytest.mark.parametrize("kind", stream.CORRUPTION_KINDS)
def test_distortion_regression_and_monotone(probe, kind):
    values = [stream.distortion(probe.images, stream.corrupt(probe.images, Corruption(kind, s, 0)))
              for s in range(1, 6)]
    np.testing.assert_allclose(values, FROZEN_DISTORTION[kind], atol=2e-6)
    assert all(a < b for a, b in zip(values, values[1:]))


def test_gaussian_noise_distortion_matches_chi_oracle(probe):
    """Mostly unclipped noise: E||n|| over 3 channels is sigma * sqrt(8 / pi)."""
    sigma = stream.SEVERITY_TABLE["gaussian_noise"][0]
    measured = stream.distortion(probe.images, stream.corrupt(probe.images, Corruption("gaussian_noise", 1, 0)))
    assert measured == pytest.approx(sigma * math.sqrt(8 / math.pi), rel=0.02)


@pytest.mark.parametrize("kind", stream.CORRUPTION_KINDS)
def test_corruption_is_pure_and_clamped(probe, kind):
    c = Corruption(kind, 3, 7)
    before = probe.images.copy()
    a, b = stream.corrupt(probe.images, c), stream.corrupt(probe.images, c)
    assert a.tobytes() == b.tobytes()
    assert np.array_equal(probe.images, before)
    assert a.min() >= 0.0 and a.max() <= 1.0 and a.dtype == np.float32
    assert np.array_equal(stream.corrupt(probe.images, Corruption(kind, 0)), probe.images)


def test_noise_depends_on_seed(probe):
    a = stream.corrupt(probe.images, Corruption("gaussian_noise", 2, 0))
    b = stream.corrupt(probe.images, Corruption("gaussian_noise", 2, 1))
    assert not np.array_equal(a, b)


def test_contrast_loses_information(probe):
    c = stream.corrupt(probe.images, Corruption("contrast", 5))
    p = stream.SEVERITY_TABLE["contrast"][4]
    mean = c.mean(axis=(1, 2, 3), keepdims=True)
    restored = np.clip((c - mean) / p + mean, 0, 1)
    assert not np.array_equal(restored, probe.images)
    # Once stored at 8 bits the lost precision is amplified by 1 / p on inversion.
    stored = np.round(c * 255) / 255
    assert np.abs(np.clip((stored - mean) / p + mean, 0, 1) - probe.images).max() > 1e-2


def test_corruption_validation():
    with pytest.raises(stream.StreamConfigError):
        Corruption("fog", 1)
    with pytest.raises(stream.StreamConfigError):
        Corruption("blur", 6)


def _split(n_per_class=20, k=10):
    labels = np.repeat(np.arange(k), n_per_class)
    return Split(np.arange(len(labels), dtype=np.float32).reshape(-1, 1, 1, 1), labels)


@given(st.integers(1, 50), st.integers(0, 10_000))
def test_normal_schedule_partitions_split(b, seed):
    split = _split()
    batches = stream.schedule(split, "normal", b, seed)
    ids = np.concatenate([x.sample_ids for x in batches])
    assert sorted(ids.tolist()) == list(range(len(split)))
    assert [x.batch_index for x in batches] == list(range(len(batches)))
    assert all(len(x) == b for x in batches[:-1])
    for x in batches:
        np.testing.assert_array_equal(x.labels, split.labels[x.sample_ids])


@given(st.integers(0, 10_000))
def test_imbalanced_schedule_has_dominant_class(seed):
    split = _split(n_per_class=40)
    batches = stream.schedule(split, "imbalanced", 16, seed)
    need = math.ceil(stream.DOMINANT_FRACTION * 16)
    doms = []
    for x in batches:
        counts = np.bincount(x.labels, minlength=10)
        assert counts.max() >= need and len(x) == 16
        doms.append(int(counts.argmax()))
    ids = np.concatenate([x.sample_ids for x in batches])
    assert len(set(ids.tolist())) == len(ids)
    assert len(set(doms)) == 10
    assert any(a != b for a, b in zip(doms, doms[1:]))


def test_imbalanced_batches_have_lower_label_entropy():
    split = _split(n_per_class=40)
    normal = np.mean([stream.label_entropy(x.labels) for x in stream.schedule(split, "normal", 16, 0)])
    imb = np.mean([stream.label_entropy(x.labels) for x in stream.schedule(split, "imbalanced", 16, 0)])
    assert imb < 0.5 * normal


def test_bs1_schedule_and_errors():
    split = _split(n_per_class=2)
    batches = stream.schedule(split, "bs1", 64, 0)
    assert len(batches) == len(split) and all(len(x) == 1 for x in batches)
    with pytest.raises(stream.StreamConfigError):
        stream.schedule(split, "normal", len(split) + 1, 0)
    with pytest.raises(stream.StreamConfigError):
        stream.schedule(split, "shuffled", 4, 0)


def test_schedule_is_seeded():
    split = _split()
    a = stream.manifest_csv(stream.schedule(split, "imbalanced", 16, 3))
    assert a == stream.manifest_csv(stream.schedule(split, "imbalanced", 16, 3))
    assert a != stream.manifest_csv(stream.schedule(split, "imbalanced", 16, 4))


def test_unlabeled_view_drops_labels():
    x = stream.schedule(_split(), "normal", 8, 0)[0]
    u = x.unlabeled()
    assert not hasattr(u, "labels") and u.images is x.images and u.batch_index == 0


def test_binary_round_trip(tmp_path, probe):
    path = tmp_path / "d.bin"
    stream.save_binary_dataset(probe, path)
    back = stream.load_binary_dataset(path)
    np.testing.assert_array_equal(back.labels, probe.labels)
    assert np.max(np.abs(back.images - probe.images)) <= 0.5 / 255 + 1e-7
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(stream.StreamConfigError):
        stream.load_binary_dataset(path)


def test_manifest_written_atomically(tmp_path):
    batches = stream.schedule(_split(n_per_class=1), "normal", 5, 0)
    stream.write_manifest(batches, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "batch_index,sample_ids,labels" and len(lines) == 3
    assert not [p for p in tmp_path.iterdir() if p.name.endswith(".tmp")]
