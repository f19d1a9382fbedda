import hashlib
from pathlib import Path

import numpy as np
import pytest

from vct_tta import cli, config, vct, vit
from vct_tta.config import RunConfig, RunConfigError, config_text, load_config

TINY = """
[model]
image_size = 8
patch_size = 4
embed_dim = 16
num_layers = 2
num_heads = 2
mlp_ratio = 2
num_classes = 4

[data]
num_classes = 4
image_size = 8
samples_per_class = 60
test_samples_per_class = 8

[train]
epochs = 8
batch_size = 16

[stream]
batch_size = 8
num_batches = 3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY)
    assert cli.main(["train", "--config", str(ini), "--out", str(root / "train")]) == 0
    return root, ini, root / "train" / cli.CHECKPOINT_NAME


def digest(directory: Path, skip=("timing.csv",)) -> dict[str, str]:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.iterdir()) if p.name not in skip}


def test_defaults_and_round_trip(tmp_path):
    cfg = RunConfig()
    assert cfg.adapt.eta_l == 0.005 and cfg.adapt.eta_s == 0.01 and cfg.loss.ln_lr == 0.001
    assert cfg.stream.corruptions == "gaussian_noise:4" and cfg.stream.num_batches == 50
    path = tmp_path / "c.ini"
    path.write_text(config_text(cfg))
    assert load_config(path) == cfg


def test_precedence_cli_over_file_over_default(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[adapt]\neta_l = 0.02\neta_s = 0.03\n[run]\nseed = 4\n")
    cfg = load_config(path, {"adapt.eta_l": "0.5"})
    assert (cfg.adapt.eta_l, cfg.adapt.eta_s, cfg.run.seed, cfg.loss.sam_rho) == (0.5, 0.03, 4, 0.05)
    args = cli.parser().parse_args(["adapt", "--config", str(path), "--seed", "9", "--adapt.eta-s", "0.1",
                                    "--set", "loss.entropy_threshold=0.5", "--mode", "ds_only"])
    cfg = cli.resolve_config(args)
    assert (cfg.run.seed, cfg.adapt.eta_l, cfg.adapt.eta_s, cfg.loss.entropy_threshold) == (9, 0.02, 0.1, 0.5)
    assert cfg.mode is vct.AdaptMode.DS_ONLY


@pytest.mark.parametrize("text, match", [
    ("[adapt]\netal = 0.1\n", "etal"),
    ("[advapt]\neta_l = 0.1\n", "advapt"),
    ("[train]\nseed = 3\n", "run.seed"),
    ("[model]\npatch_size = 7\n", "patch_size"),
    ("[adapt]\nmode = annealed\n", "adapt.mode"),
    ("[stream]\ncorruptions = fog:3\n", "fog"),
    ("[stream]\ncorruptions = blur:x\n", "severity"),
    ("[loss]\nsam_rho = abc\n", "sam_rho"),
    ("[data]\nnum_classes = 7\n", "num_classes"),
])
def test_bad_config_is_a_hard_error(tmp_path, text, match):
    path = tmp_path / "c.ini"
    path.write_text(text)
    with pytest.raises(RunConfigError, match=match):
        load_config(path)


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(config.OUTPUT_ROOT_ENV, str(tmp_path))
    assert RunConfig().output_dir() == tmp_path / "seed0"
    assert load_config(None, {"run.out_dir": "x"}).output_dir() == Path("x")


def test_corruption_list_uses_run_seed():
    cfg = load_config(None, {"stream.corruptions": "blur:2, contrast:5", "run.seed": "3"})
    cs = cfg.stream.corruption_list(cfg.run.seed)
    assert [(c.kind, c.severity, c.corruption_seed) for c in cs] == [("blur", 2, 3), ("contrast", 5, 3)]


def test_train_outputs(workspace):
    root, _, ckpt = workspace
    model = vit.load_checkpoint(ckpt)
    assert model.config.embed_dim == 16
    lines = (root / "train" / "train_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,clean_test_accuracy" and len(lines) == 9
    assert float(lines[-1].split(",")[2]) >= 0.8


def test_train_is_reproducible(workspace, tmp_path):
    root, ini, ckpt = workspace
    assert cli.main(["train", "--config", str(ini), "--out", str(tmp_path)]) == 0
    assert (tmp_path / cli.CHECKPOINT_NAME).read_bytes() == ckpt.read_bytes()


def test_adapt_outputs_and_byte_determinism(workspace):
    root, ini, ckpt = workspace
    out = root / "adapt"
    argv = ["adapt", "--config", str(ini), "--checkpoint", str(ckpt), "--out", str(out),
            "--stream.corruptions", "gaussian_noise:3,contrast:4"]
    assert cli.main(argv) == 0
    first = digest(out)
    assert set(first) == {"config.ini", "records.csv", "tokens.csv", "summary.txt"}
    assert cli.main(argv) == 0
    assert digest(out) == first
    records = (out / "records.csv").read_text().splitlines()
    assert records[0] == ",".join(cli.RECORD_HEADER) and len(records) == 1 + 2 * 3
    tokens = (out / "tokens.csv").read_text().splitlines()
    assert len(tokens) == 1 + 2 * 3 * 2 and len(tokens[0].split(",")) == 3 + 16
    summary = dict(line.split(" = ") for line in (out / "summary.txt").read_text().splitlines())
    assert summary["mode"] == "full" and 0.0 <= float(summary["accuracy"]) <= 1.0
    assert "accuracy.contrast-4" in summary
    assert len((out / "timing.csv").read_text().splitlines()) == 7


def test_source_only_on_clean_stream_matches_clean_accuracy(workspace, tmp_path):
    _, ini, ckpt = workspace
    assert cli.main(["adapt", "--config", str(ini), "--checkpoint", str(ckpt), "--out", str(tmp_path),
                     "--mode", "source_only", "--stream.corruptions", "gaussian_noise:0",
                     "--stream.num-batches", "0"]) == 0
    cfg = load_config(ini)
    from vct_tta import train
    clean = train.accuracy(vit.load_checkpoint(ckpt), cli.build_datasets(cfg)[1])
    summary = dict(line.split(" = ") for line in (tmp_path / "summary.txt").read_text().splitlines())
    assert float(summary["accuracy"]) == clean


def test_bs1_protocol_one_record_per_sample(workspace, tmp_path):
    _, ini, ckpt = workspace
    assert cli.main(["adapt", "--config", str(ini), "--checkpoint", str(ckpt), "--out", str(tmp_path),
                     "--stream.protocol", "bs1", "--stream.num-batches", "0"]) == 0
    assert len((tmp_path / "records.csv").read_text().splitlines()) == 1 + 4 * 8


def test_ablate_table(workspace, tmp_path):
    _, ini, ckpt = workspace
    assert cli.main(["ablate", "--config", str(ini), "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "ablation.csv").read_text().splitlines()
    assert rows[0] == ",".join(cli.ABLATION_HEADER) and len(rows) == 7
    assert [r.split(",")[0] for r in rows[1:]] == [m.value for m in vct.ABLATION_ORDER]
    solo = tmp_path / "solo"
    assert cli.main(["adapt", "--config", str(ini), "--checkpoint", str(ckpt), "--out", str(solo),
                     "--mode", "source_only"]) == 0
    summary = dict(line.split(" = ") for line in (solo / "summary.txt").read_text().splitlines())
    assert rows[1].split(",")[2] == summary["accuracy"]


def test_analyze_pipeline(workspace, tmp_path):
    root, ini, ckpt = workspace
    runs = []
    for mode in ("full", "full_no_reset", "ds_only"):
        runs.append(tmp_path / mode)
        assert cli.main(["adapt", "--config", str(ini), "--checkpoint", str(ckpt), "--out", str(runs[-1]),
                         "--mode", mode]) == 0
    out = tmp_path / "analysis"
    assert cli.main(["analyze", *map(str, runs), "--out", str(out), "--sweep", "--grid-points", "2",
                     "--window", "2"]) == 0
    summary = (out / "similarity_summary.csv").read_text().splitlines()
    assert [r.split(",")[1] for r in summary[1:]] == ["full", "full_no_reset", "ds_only", "source_only"]
    sweep = (out / "sensitivity.csv").read_text().splitlines()
    assert len(sweep) == 1 + 5 and sweep[-1].split(",")[1] == "zero"
    assert len((out / "pca.csv").read_text().splitlines()) == 1 + 3 * 3
    before = digest(out)
    assert cli.main(["analyze", *map(str, runs), "--out", str(out), "--sweep", "--grid-points", "2",
                     "--window", "2"]) == 0
    assert digest(out) == before

    single = tmp_path / "single"
    assert cli.main(["analyze", str(runs[0]), "--out", str(single)]) == 0
    assert {r.split(",")[0] for r in (single / "pca.csv").read_text().splitlines()[1:]} == {"full/gaussian_noise-4"}


def test_analyze_guards(workspace, tmp_path, capsys):
    _, ini, ckpt = workspace
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["adapt", "--config", str(ini), "--checkpoint", str(ckpt), "--out", str(a)]) == 0
    assert cli.main(["adapt", "--config", str(ini), "--checkpoint", str(ckpt), "--out", str(b), "--seed", "1"]) == 0
    assert cli.main(["analyze", str(a), str(b), "--out", str(tmp_path / "x")]) == 2
    assert "seed" in capsys.readouterr().err
    (a / "tokens.csv").unlink()
    assert cli.main(["analyze", str(a), "--out", str(tmp_path / "y")]) == 2
    assert "tokens.csv" in capsys.readouterr().err


def test_error_exit_codes(workspace, tmp_path, capsys):
    _, ini, ckpt = workspace
    assert cli.main(["adapt", "--config", str(ini), "--out", str(tmp_path)]) == 2
    assert "checkpoint" in capsys.readouterr().err
    assert cli.main(["adapt", "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == 2
    assert "does not match" in capsys.readouterr().err
    assert cli.main(["train", "--model.patch-size", "7", "--out", str(tmp_path)]) == 2
    assert "patch_size" in capsys.readouterr().err
    assert not any(tmp_path.iterdir())
