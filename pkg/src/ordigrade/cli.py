"""Command-line pipeline: ``gen-data``, ``train``, ``evaluate``, ``predict``.

Exit codes: 0 success, 2 config error, 3 data error, 4 training failure,
5 inference failure. ``ORDIGRADE_SEED`` overrides the config seed.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from . import __version__, metrics
from .config import SEED_ENV, ConfigError, RunConfig, load_config
from .data import (DataError, Dataset, generate_synthetic, has_labels, load_dataset_dir, load_images,
                   load_kaggle_csv, save_dataset, split_folds)
from .ensemble import EnsembleConfig, InferenceError, ensemble_predict, load_members, write_predictions
from .train import ProtocolError, run_cv

logger = logging.getLogger("ordigrade")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_INFER = 0, 2, 3, 4, 5


class TrainingError(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------------

def _load_domain(cfg: RunConfig, tag: str) -> Dataset:
    src = cfg.domains[tag]
    if src.is_synthetic:
        path = cfg.data_dir(tag)
        if not (path / "labels.csv").exists():
            raise DataError(f"{path}: no generated data for domain {tag!r}; run `ordigrade gen-data` first")
        return load_dataset_dir(path)
    return load_kaggle_csv(src.labels, src.images, src.schema, domain_tag=tag, preprocess_config=src.preprocess)


def _labelled(cfg: RunConfig, value: str) -> Dataset:
    """A dataset argument is a directory path or the name of a configured domain."""
    if value in cfg.domains and not Path(value).exists():
        return _load_domain(cfg, value)
    if not has_labels(value):
        raise DataError(f"{value} has no labels; use `ordigrade predict` for unlabelled data")
    return load_dataset_dir(value)


def _unlabelled(cfg: RunConfig, value: str):
    if value in cfg.domains and not Path(value).exists():
        src = cfg.domains[value]
        if src.is_synthetic:
            return load_images(cfg.data_dir(value))
        return load_images(src.images or src.labels.parent, src.schema, src.preprocess)
    return load_images(value)


def _default_checkpoints(cfg: RunConfig) -> list:
    found = sorted((cfg.output_dir / "checkpoints").glob("*/stage_posttrain_fold_*.ckpt"))
    if not found:
        raise InferenceError(f"no post-trained checkpoints under {cfg.output_dir / 'checkpoints'}; "
                             "run `ordigrade train` or pass --checkpoints")
    return found


def _report_name(path) -> str:
    p = Path(path)
    return f"{p.parent.name}_{p.stem}"


# -- commands ------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    targets = [(tag, src) for tag, src in cfg.domains.items() if src.is_synthetic]
    for tag, _ in targets:
        path = cfg.data_dir(tag)
        if path.exists() and any(path.iterdir()) and not args.force:
            raise DataError(f"{path} is not empty; use --force to overwrite")
    for tag, src in targets:
        path = cfg.data_dir(tag)
        if path.exists():
            shutil.rmtree(path)
        ds = generate_synthetic(src.synthetic)
        save_dataset(ds, path, manifest={"config": src.synthetic.to_dict(), "seed": src.synthetic.seed})
        print(f"{tag}: {len(ds)} images -> {path}")
    for tag, src in cfg.domains.items():
        if not src.is_synthetic:
            print(f"{tag}: csv source {src.labels}, nothing to generate")
    return EXIT_OK


def _write_summary(path: Path, name: str, summary: dict):
    lines = [f"variant={name}",
             "val_qwk=" + ",".join(f"{v:.10f}" for v in summary["val_qwk"]),
             f"val_qwk_mean={summary['val_qwk_mean']:.10f}",
             f"val_qwk_std={summary['val_qwk_std']:.10f}"]
    hold = summary.get("holdout") or {}
    for f, rep in sorted(hold.get("folds", {}).items()):
        lines.append(f"[holdout fold {f}]")
        lines.append(rep.to_text())
    for key in ("ensemble_no_tta", "ensemble", "ensemble_screening"):
        if key in hold:
            lines.append(f"[holdout {key}]")
            lines.append(hold[key].to_text())
    path.write_text("\n".join(lines) + "\n")


def cmd_train(cfg: RunConfig, args) -> int:
    folds = None
    if args.fold is not None:
        folds = sorted(set(args.fold))
        bad = [f for f in folds if not 0 <= f < cfg.n_folds]
        if bad:
            raise ConfigError(f"--fold {bad} out of range for {cfg.n_folds} folds")
    jobs = args.jobs if args.jobs is not None else cfg.jobs
    if jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    source = _load_domain(cfg, "pretrain")
    target = _load_domain(cfg, "main")
    split = split_folds(target, cfg.n_folds, cfg.holdout_fraction, cfg.split_seed)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "split.json").write_text(split.to_json() + "\n")
    for v in range(cfg.variants):
        name = cfg.variant_name(v)
        try:
            res = run_cv((source, target), split, cfg.stages, cfg.variant_model(v), folds=folds,
                         output_dir=cfg.checkpoint_dir(v), jobs=jobs, tta=cfg.tta_transforms(), trim=cfg.trim)
        except (ProtocolError, RuntimeError, ValueError, IndexError) as exc:
            raise TrainingError(f"variant {name}: {exc}") from exc
        suffix = "" if cfg.variants == 1 else f"_{name}"
        (cfg.output_dir / f"manifest{suffix}.csv").write_text(res.manifest_csv())
        _write_summary(cfg.output_dir / f"summary{suffix}.txt", name, res.summary)
        records = res.summary.get("holdout", {}).get("ensemble_records")
        if records is not None:
            write_predictions(records, cfg.output_dir / f"holdout_predictions{suffix}.csv")
        print(f"{name}: val_qwk mean={res.summary['val_qwk_mean']:.4f} std={res.summary['val_qwk_std']:.4f}")
        if "ensemble" in res.summary.get("holdout", {}):
            print(f"{name}: holdout ensemble qwk={res.summary['holdout']['ensemble'].qwk:.4f}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    mode = {"five_class": metrics.FIVE_CLASS, "binary": metrics.BINARY_SCREENING, None: cfg.metrics_mode}[args.mode]
    ckpts = [Path(c) for c in args.checkpoints] if args.checkpoints else _default_checkpoints(cfg)
    out_dir = cfg.inside_output(args.out)
    dataset = _labelled(cfg, args.dataset)
    members = load_members(ckpts)
    tta = cfg.tta_transforms(args.tta)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [metrics.MetricsReport.csv_header()]
    for path, model in zip(ckpts, members):
        _, rep = ensemble_predict(EnsembleConfig([model], tta, trim=args.trim), dataset, mode=mode)
        name = _report_name(path)
        (out_dir / f"{name}.txt").write_text(rep.to_text() + "\n")
        rows.append(rep.to_csv_row(name))
    if len(members) > 1:
        _, rep = ensemble_predict(EnsembleConfig(members, tta, trim=args.trim), dataset, mode=mode)
        (out_dir / "ensemble.txt").write_text(rep.to_text() + "\n")
        rows.append(rep.to_csv_row("ensemble"))
    (out_dir / "reports.csv").write_text("\n".join(rows) + "\n")
    print(rows[-1])
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    ckpts = [Path(c) for c in args.checkpoints] if args.checkpoints else _default_checkpoints(cfg)
    out = cfg.inside_output(args.out)
    images = _unlabelled(cfg, args.dataset)
    ens = EnsembleConfig(load_members(ckpts), cfg.tta_transforms(args.tta), trim=args.trim)
    records, _ = ensemble_predict(ens, images, with_metrics=False)
    write_predictions(records, out, emit_raw=args.emit_raw)
    print(f"{len(records)} predictions -> {out}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------

def _trim(value: str) -> float:
    q = float(value)
    if not 0.0 <= q < 0.5:
        raise argparse.ArgumentTypeError("trim must lie in [0, 0.5)")
    return q


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ordigrade", description="Three-head ordinal grading pipeline.",
                                epilog=f"{SEED_ENV} overrides the config seed.")
    p.add_argument("--version", action="version", version=f"ordigrade {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic domains under output_dir/data")
    g.add_argument("config", help="run config (YAML)")
    g.add_argument("--force", action="store_true", help="overwrite existing dataset directories")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="pretrain, then main training and fusion fit per fold")
    t.add_argument("config", help="run config (YAML)")
    t.add_argument("--fold", type=int, action="append", metavar="K",
                   help="train only fold K (repeatable; default all folds)")
    t.add_argument("--jobs", type=int, metavar="N", help="parallel fold workers (default from config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="metrics report per checkpoint and for the ensemble")
    e.add_argument("config", help="run config (YAML)")
    e.add_argument("--checkpoints", nargs="+", metavar="CKPT",
                   help="checkpoint files (default: every post-trained checkpoint of the run)")
    e.add_argument("--dataset", default="main", help="labelled dataset directory or domain name (default main)")
    e.add_argument("--mode", choices=("five_class", "binary"), help="metric mode (default from config)")
    e.add_argument("--tta", action=argparse.BooleanOptionalAction, default=False,
                   help="evaluate with the configured TTA set (default off)")
    e.add_argument("--trim", type=_trim, default=0.25, help="trimmed-mean fraction per tail (default 0.25)")
    e.add_argument("--out", default="reports", help="report directory under output_dir (default reports)")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("predict", help="ensemble predictions with TTA and trimmed-mean pooling")
    r.add_argument("config", help="run config (YAML)")
    r.add_argument("--checkpoints", nargs="+", metavar="CKPT",
                   help="checkpoint files (default: every post-trained checkpoint of the run)")
    r.add_argument("--dataset", default="main", help="image directory or domain name (default main)")
    r.add_argument("--tta", action=argparse.BooleanOptionalAction, default=True,
                   help="use the configured TTA set; --no-tta uses identity only")
    r.add_argument("--trim", type=_trim, default=0.25, help="trimmed-mean fraction per tail (default 0.25)")
    r.add_argument("--emit-raw", action="store_true", help="add one raw column per (model, fold, tta) triple")
    r.add_argument("--out", default="predictions.csv", help="output CSV under output_dir (default predictions.csv)")
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (InferenceError, FileNotFoundError, ValueError) as exc:
        print(f"inference failed: {exc}", file=sys.stderr)
        return EXIT_INFER


if __name__ == "__main__":
    sys.exit(main())
