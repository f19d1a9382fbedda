"""Command-line entry point: ``train``, ``adapt``, ``ablate`` and ``analyze``.

Each command writes into one run directory.  Everything except
``timing.csv`` is a pure function of the resolved config and checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import zlib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis, stream, train, vct, vit
from .config import HIDDEN_KEYS, RunConfig, RunConfigError, config_text, domain_name, load_config
from .util import atomic_write_text, derive_rng, write_csv

log = logging.getLogger("vct_tta")

CHECKPOINT_NAME = "source.ckpt"
TRAIN_LOG_HEADER = ["epoch", "train_loss", "clean_test_accuracy"]
RECORD_HEADER = ["domain", "batch_index", "batch_size", "accuracy", "mean_entropy", "pass_rate", "updated", "predictions"]
TIMING_HEADER = ["domain", "batch_index", "wall_time"]
ABLATION_HEADER = ["mode", "label", "accuracy", "mean_pass_rate"]


# ---------------------------------------------------------------------------
# pipeline pieces, usable without the argument parser


def build_datasets(cfg: RunConfig) -> tuple[stream.Split, stream.Split]:
    return stream.generate_dataset(cfg.data)


def train_model(cfg: RunConfig, on_epoch=None) -> tuple[vit.ViTModel, float]:
    tr, te = build_datasets(cfg)
    init = vit.init_model(cfg.model, derive_rng(cfg.run.seed, "model/init"))
    model = train.train_source(init, tr, replace(cfg.train, seed=cfg.run.seed), te, on_epoch=on_epoch)
    return model, train.accuracy(model, te)


@dataclass
class Domain:
    name: str
    batches: list[stream.StreamBatch]


def build_streams(cfg: RunConfig, test: stream.Split | None = None) -> list[Domain]:
    """One batch stream per configured corruption, all from the clean test split."""
    if test is None:
        _, test = build_datasets(cfg)
    domains = []
    for c in cfg.stream.corruption_list(cfg.run.seed):
        split = stream.Split(stream.corrupt(test.images, c), test.labels)
        batches = stream.schedule(split, cfg.stream.protocol, cfg.stream.batch_size, cfg.run.seed)
        if cfg.stream.num_batches:
            batches = batches[:cfg.stream.num_batches]
        domains.append(Domain(domain_name(c), batches))
    return domains


def load_model(cfg: RunConfig, checkpoint=None) -> vit.ViTModel:
    path = checkpoint or cfg.run.checkpoint
    if not path:
        raise RunConfigError("no checkpoint given (use --checkpoint or run.checkpoint)")
    return vit.load_checkpoint(path, expected=cfg.model)


def adapt_domains(cfg: RunConfig, model: vit.ViTModel, domains: list[Domain],
                  mode: vct.AdaptMode | None = None, eta_l=None, eta_s=None) -> dict[str, list[vct.RunRecord]]:
    """Each domain is adapted independently, starting from the source model."""
    mode = cfg.mode if mode is None else mode
    eta_l = cfg.adapt.eta_l if eta_l is None else eta_l
    eta_s = cfg.adapt.eta_s if eta_s is None else eta_s
    return {d.name: vct.run_stream(model, d.batches, mode, eta_l, eta_s, cfg.loss) for d in domains}


def overall_accuracy(results: dict[str, list[vct.RunRecord]]) -> float:
    return vct.stream_accuracy([r for recs in results.values() for r in recs])


def mean_pass_rate(results: dict[str, list[vct.RunRecord]]) -> float:
    rates = [r.pass_rate for recs in results.values() for r in recs]
    return float(np.mean(rates)) if rates else float("nan")


def write_run(out: Path, cfg: RunConfig, model: vit.ViTModel, results: dict[str, list[vct.RunRecord]]) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    rec_rows, time_rows, token_rows = [], [], []
    for name, records in results.items():
        for r in records:
            rec_rows.append([name, r.batch_index, r.batch_size, r.accuracy, r.mean_entropy, r.pass_rate,
                             int(r.updated), " ".join(map(str, r.predictions.tolist()))])
            time_rows.append([name, r.batch_index, r.wall_time])
            token_rows.append([name, r.batch_index, "CL", *r.token_cl.tolist()])
            token_rows.append([name, r.batch_index, "composed_mean", *r.token_composed_mean.tolist()])
    d = model.config.embed_dim
    paths = {n: out / n for n in ("config.ini", "records.csv", "timing.csv", "tokens.csv", "summary.txt")}
    atomic_write_text(paths["config.ini"], config_text(cfg))
    write_csv(paths["records.csv"], RECORD_HEADER, rec_rows)
    write_csv(paths["timing.csv"], TIMING_HEADER, time_rows)
    write_csv(paths["tokens.csv"], ["domain", "batch_index", "token_kind", *[f"v{i}" for i in range(d)]], token_rows)
    summary = {
        "mode": cfg.mode.value,
        "seed": cfg.run.seed,
        "protocol": cfg.stream.protocol,
        "checkpoint_crc32": f"{zlib.crc32(vit.checkpoint_bytes(model)):08x}",
        "accuracy": overall_accuracy(results),
        "mean_pass_rate": mean_pass_rate(results),
    }
    for name, records in results.items():
        summary[f"accuracy.{name}"] = vct.stream_accuracy(records)
    atomic_write_text(paths["summary.txt"], "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                                                    for k, v in summary.items()))
    return list(paths.values())


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig) -> Path:
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    rows = []

    model, acc = train_model(cfg, lambda epoch, loss, acc: rows.append([epoch, loss, acc]))
    path = vit.save_checkpoint(model, out / CHECKPOINT_NAME)
    write_csv(out / "train_log.csv", TRAIN_LOG_HEADER, rows)
    atomic_write_text(out / "config.ini", config_text(cfg))
    log.info("clean test accuracy %.4f, checkpoint %s", acc, path)
    return path


def cmd_adapt(cfg: RunConfig, checkpoint=None) -> Path:
    model = load_model(cfg, checkpoint)
    results = adapt_domains(cfg, model, build_streams(cfg))
    out = cfg.output_dir()
    write_run(out, cfg, model, results)
    log.info("%s accuracy %.4f", cfg.mode.value, overall_accuracy(results))
    return out


def ablation_rows(cfg: RunConfig, model: vit.ViTModel, domains: list[Domain]) -> list[list]:
    rows = []
    for mode in vct.ABLATION_ORDER:
        results = adapt_domains(cfg, model, domains, mode)
        rows.append([mode.value, mode.label, overall_accuracy(results), mean_pass_rate(results)])
    return rows


def cmd_ablate(cfg: RunConfig, checkpoint=None) -> Path:
    model = load_model(cfg, checkpoint)
    rows = ablation_rows(cfg, model, build_streams(cfg))
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", ABLATION_HEADER, rows)
    atomic_write_text(out / "config.ini", config_text(cfg))
    for mode, label, acc, _ in rows:
        log.info("%-40s %.4f", label, acc)
    return out / "ablation.csv"


def read_tokens(run_dir: Path, kind: str = "CL") -> dict[str, list[tuple[int, np.ndarray]]]:
    path = Path(run_dir) / "tokens.csv"
    if not path.is_file():
        raise RunConfigError(f"{run_dir}: missing trajectory file tokens.csv")
    tracks: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if row[2] == kind:
                tracks.setdefault(row[0], []).append((int(row[1]), np.array(row[3:], dtype=np.float64)))
    return tracks


def cmd_analyze(run_dirs: Sequence[Path], out: Path, checkpoint=None, sweep: bool = False,
                grid_points: int = 7, window: int = analysis.DEFAULT_WINDOW) -> list[Path]:
    """Trajectory PCA, oracle similarity and (optionally) a learning-rate sweep."""
    if not run_dirs:
        raise RunConfigError("analyze needs at least one run directory")
    cfgs = []
    for d in run_dirs:
        if not (Path(d) / "config.ini").is_file():
            raise RunConfigError(f"{d}: missing config.ini")
        cfgs.append(load_config(Path(d) / "config.ini"))
    base = cfgs[0]
    for d, c in zip(run_dirs, cfgs):
        if c.run.seed != base.run.seed or c.stream != base.stream or c.data != base.data:
            raise RunConfigError(f"{d}: seed or stream differs from {run_dirs[0]}; runs must share one stream")
    tracks_by_run = {c.mode.value: read_tokens(d) for d, c in zip(run_dirs, cfgs)}
    out = Path(out)
    written = []

    tset = analysis.TrajectorySet()
    for mode, tracks in tracks_by_run.items():
        for domain, track in tracks.items():
            for i, snap in track:
                tset.add(f"{mode}/{domain}", i, snap, mode=mode, domain=domain, seed=base.run.seed)
    written.append(out / "pca.csv")
    write_csv(written[-1], analysis.PCA_HEADER, tset.projection_rows())

    model = load_model(base, checkpoint)
    domains = build_streams(base)
    sim_rows, summary_rows = [], []
    for dom in domains:
        oracle = train.train_oracle_vct(model, dom.batches, base.mode, base.adapt.eta_l, base.adapt.eta_s,
                                        base.loss.ln_lr)
        tracks = {m: [s for _, s in t[dom.name]] for m, t in tracks_by_run.items() if dom.name in t}
        tracks.setdefault(vct.AdaptMode.SOURCE_ONLY.value, [model.source_class_token] * len(oracle))
        rows, summ = analysis.similarity_report(tracks, oracle, window)
        sim_rows += [[dom.name, *r] for r in rows]
        summary_rows += [[dom.name, *r] for r in summ]
    written.append(out / "similarity.csv")
    write_csv(written[-1], ["domain", *analysis.SIMILARITY_HEADER], sim_rows)
    written.append(out / "similarity_summary.csv")
    write_csv(written[-1], ["domain", *analysis.SIMILARITY_SUMMARY_HEADER], summary_rows)

    if sweep:
        rows = []
        for dom in domains:
            run = analysis.stream_runner(model, dom.batches, vct.AdaptMode.FULL, base.loss)
            rows += [[dom.name, *r] for r in analysis.sensitivity_sweep(
                run, analysis.default_grid(grid_points), base.adapt.eta_l, base.adapt.eta_s)]
        written.append(out / "sensitivity.csv")
        write_csv(written[-1], ["domain", *analysis.SWEEP_HEADER], rows)
    return written


# ---------------------------------------------------------------------------
# argument parsing

_OVERRIDE_SECTIONS = ("model", "data", "train", "loss", "stream", "adapt")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file with [section] key = value entries")
    p.add_argument("--seed", type=int, help="master seed (run.seed)")
    p.add_argument("--out", type=Path, help="output directory (run.out_dir)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config field; repeatable")
    cfg = RunConfig()
    for section in _OVERRIDE_SECTIONS:
        for f in fields(getattr(cfg, section)):
            if (section, f.name) in HIDDEN_KEYS:
                continue
            p.add_argument(f"--{section}.{f.name}".replace("_", "-"), dest=f"ov:{section}.{f.name}",
                           default=None, help=argparse.SUPPRESS)


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vct-tta", description="Bi-level class-token test-time adaptation on a mini ViT.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train the source model and write a checkpoint")
    _add_common(p)
    for name in ("adapt", "ablate"):
        p = sub.add_parser(name, help="adapt on the corrupted stream" if name == "adapt" else "run all six modes")
        _add_common(p)
        p.add_argument("--checkpoint", type=Path)
        if name == "adapt":
            p.add_argument("--mode", choices=[m.value for m in vct.AdaptMode])
    p = sub.add_parser("analyze", help="PCA, oracle similarity and learning-rate sweep over run directories")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--grid-points", type=int, default=7)
    p.add_argument("--window", type=int, default=analysis.DEFAULT_WINDOW)
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise RunConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key, value in vars(args).items():
        if key.startswith("ov:") and value is not None:
            overrides[key[3:]] = value
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.out is not None:
        overrides["run.out_dir"] = str(args.out)
    if getattr(args, "mode", None):
        overrides["adapt.mode"] = args.mode
    if getattr(args, "checkpoint", None):
        overrides["run.checkpoint"] = str(args.checkpoint)
    return load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "analyze":
            written = cmd_analyze(args.runs, args.out, args.checkpoint, args.sweep, args.grid_points, args.window)
            missing = [p for p in written if not p.is_file()]
        else:
            cfg = resolve_config(args)
            if args.command == "train":
                target = cmd_train(cfg)
            elif args.command == "adapt":
                target = cmd_adapt(cfg)
            else:
                target = cmd_ablate(cfg)
            missing = [] if Path(target).exists() else [target]
    except (RunConfigError, analysis.AnalysisInputError, vit.ConfigError, vit.CheckpointError, stream.StreamConfigError,
            train.TrainingDiagnosticError, vct.AdaptationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if missing:
        print(f"error: artifacts not produced: {missing}", file=sys.stderr)
        return 1
    print(target if args.command != "analyze" else "\n".join(map(str, written)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
