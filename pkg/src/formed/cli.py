"""Command-line entry point: ``formed <command> [flags]``.

Commands
    pretrain   train a backbone on a synthetic forecasting corpus
    synth      write a synthetic cohort to disk
    repurpose  train the shared head and per-dataset parameters on a pretrained checkpoint
    adapt      fit one new dataset on a repurposed checkpoint, optionally over data ratios
    eval       score one dataset split of a checkpoint
    report     aggregate metric CSVs into summary tables and a delta plot

Run directories hold ``checkpoint/`` plus the CSV outputs of the command.
``--ckpt`` accepts either a checkpoint directory or a run directory.

Exit codes: 0 success, 2 configuration error, 3 data, IO or checkpoint
error, 4 stage-contract violation.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .backbone import BackboneConfig, BackboneWeights, forecast_mse, pretrain_forecasting
from .config import ConfigError, RunConfig, load_config
from .data import (
    DataError,
    DatasetSpec,
    load_dataset,
    make_sinusoid_corpus,
    make_synthetic_cohort,
    name_seed,
    normalize,
    save_dataset,
    split_by_subject,
)
from .metrics import paired_deltas, write_deltas_csv, write_reports_csv
from .registry import CheckpointError, ModelState, StageError, load_checkpoint, save_checkpoint
from .report import build_report
from .tensor import NonFiniteError, get_dtype
from .training import StageConfig, adapt, evaluate_dataset, featurize, few_shot_curve, init_head, repurpose

log = logging.getLogger("formed")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_STAGE = 0, 2, 3, 4
HELDOUT_SERIES = 64


# ---------------------------------------------------------------- helpers


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _resolve(cfg: RunConfig, value: str) -> Path:
    """Config paths are relative to the config file's directory."""
    p = Path(value)
    if p.is_absolute() or cfg.source.startswith("<"):
        return p
    return Path(os.path.normpath(Path(cfg.source).parent / p))


def _out_dir(args, cfg: RunConfig | None, command: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.get("output")["dir"]:
        return _resolve(cfg, cfg.get("output")["dir"]) / command
    raise ConfigError(f"{command}: no output location; pass --out or set output.dir")


def _checkpoint_dir(path) -> Path:
    path = Path(path)
    if not (path / "manifest.ini").exists() and (path / "checkpoint" / "manifest.ini").exists():
        return path / "checkpoint"
    return path


def _load(path) -> ModelState:
    return load_checkpoint(_checkpoint_dir(path))


def _stage_config(cfg: RunConfig, stage: str, seed: int) -> StageConfig:
    sec = cfg.get(stage)
    try:
        return StageConfig(stage, epochs=sec["epochs"], batch_size=sec["batch_size"], lr=sec["lr"], patience=sec["patience"], seed=seed)
    except ValueError as exc:
        raise ConfigError(f"[{stage}]: {exc}") from None


def _load_splits(cfg: RunConfig, name: str) -> dict:
    data = cfg.section("data")
    ds = load_dataset(_resolve(cfg, data["root"]) / name)
    if ds.name != name:
        raise DataError(f"dataset directory {name!r} holds dataset {ds.name!r}")
    if data["normalize"]:
        ds = normalize(ds)
    return split_by_subject(ds.subjects, data["split"], data["split_seed"]).apply(ds)


def _seeds(args, cfg: RunConfig, stage: str) -> list[int]:
    seeds = args.seeds if args.seeds else cfg.get(stage)["seeds"]
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    b, p = cfg.section("backbone"), cfg.section("pretrain")
    try:
        config = BackboneConfig(**b)
    except ValueError as exc:
        raise ConfigError(f"[backbone]: {exc}") from None
    ctx = config.patch_size * min(config.max_patches, (p["corpus_length"] - config.horizon) // config.patch_size)
    if ctx < config.patch_size:
        raise ConfigError("pretrain.corpus_length is too short for one patch plus the horizon")
    out = _out_dir(args, cfg, "pretrain")
    seed = args.seeds[0] if args.seeds else p["seed"]
    corpus = make_sinusoid_corpus(p["corpus_series"], p["corpus_length"], seed=seed)
    held = make_sinusoid_corpus(HELDOUT_SERIES, ctx + config.horizon, seed=name_seed(seed, "heldout"))
    x = np.stack([s[:ctx] for s in held])
    y = np.stack([s[ctx:] for s in held])
    before = forecast_mse(BackboneWeights.init(config, seed), x, y)
    w = pretrain_forecasting(
        corpus, config, p["epochs"], seed=seed, steps_per_epoch=p["steps_per_epoch"], batch_size=p["batch_size"], lr=p["lr"]
    )
    after = forecast_mse(w, x, y)
    save_checkpoint(out / "checkpoint", ModelState(backbone=w, stage="pretrained", seed=seed))
    print(f"held-out forecast MSE: {after:.6g} (untrained {before:.6g}, ratio {before / after:.3g})")
    print(f"checkpoint: {out / 'checkpoint'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    s = cfg.section("synth")
    if args.out:
        root = Path(args.out)
    else:
        root = _resolve(cfg, cfg.section("data")["root"])
    try:
        specs = [DatasetSpec(**d) for d in s["datasets"]]
    except DataError as exc:
        raise ConfigError(f"[synth]: {exc}") from None
    seed = args.seeds[0] if args.seeds else s["seed"]
    cohort = make_synthetic_cohort(specs, s["snr"], s["subjects_per_dataset"], s["samples_per_subject"], seed)
    for name, ds in cohort.items():
        save_dataset(ds, root / name)
        print(f"{name}: {len(ds)} samples, {ds.spec.channels} channels x {ds.spec.length} steps -> {root / name}")
    return EXIT_OK


def cmd_repurpose(args) -> int:
    cfg = load_config(args.config)
    if not args.ckpt:
        raise ConfigError("repurpose needs --ckpt (a pretrained checkpoint)")
    data = cfg.section("data")
    names = [args.dataset] if args.dataset else data["datasets"]
    if not names:
        raise ConfigError("no datasets: set data.datasets or pass --dataset")
    seeds = _seeds(args, cfg, "repurpose")
    configs = {s: _stage_config(cfg, "repurpose", s) for s in seeds}
    out = _out_dir(args, cfg, "repurpose")

    base = _load(args.ckpt)
    base.require_stage("pretrained")
    splits = {n: _load_splits(cfg, n) for n in names}
    feats = {part: {n: featurize(splits[n][part], base.backbone) for n in names} for part in ("train", "val", "test")}
    reports = []
    for i, seed in enumerate(seeds):
        state = base if i == 0 else _load(args.ckpt)
        state.seed = seed
        init_head(state, [splits[n]["train"].spec for n in names], seed)
        repurpose(feats["train"], feats["val"], state, configs[seed])
        for n in names:
            for part in ("val", "test"):
                reports.append(evaluate_dataset(feats[part][n], state, part, seed))
        if i == 0:
            save_checkpoint(out / "checkpoint", state)
    write_reports_csv(reports, out / "metrics.csv")
    write_deltas_csv(paired_deltas(reports), out / "deltas.csv")
    _print_reports(reports)
    print(f"outputs: {out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = load_config(args.config)
    if not args.ckpt or not args.dataset:
        raise ConfigError("adapt needs --ckpt (a repurposed checkpoint) and --dataset")
    cfg.section("data")
    name = args.dataset
    seeds = _seeds(args, cfg, "adapt")
    configs = {s: _stage_config(cfg, "adapt", s) for s in seeds}
    ratios = args.ratios if args.ratios is not None else cfg.get("adapt")["ratios"]
    if any(not 0 < r <= 1 for r in ratios):
        raise ConfigError(f"ratios must lie in (0, 1], got {ratios}")
    out = _out_dir(args, cfg, "adapt")

    base = _load(args.ckpt)
    base.require_stage("repurposed", "adapted")
    if name in base.registry:
        raise KeyError(f"dataset {name!r} is already registered in the checkpoint")
    parts = _load_splits(cfg, name)
    spec = parts["train"].spec
    feats = {part: featurize(parts[part], base.backbone) for part in ("train", "val", "test")}
    reports = []
    for i, seed in enumerate(seeds):
        state = base if i == 0 else _load(args.ckpt)
        adapt(name, feats["train"], feats["val"], spec.classes, state, configs[seed], spec.task_kind)
        for part in ("val", "test"):
            reports.append(evaluate_dataset(feats[part], state, part, seed))
        if i == 0:
            save_checkpoint(out / "checkpoint", state)
    write_reports_csv(reports, out / "metrics.csv")
    write_deltas_csv(paired_deltas(reports), out / "deltas.csv")
    if ratios:
        state = _load(args.ckpt)
        rows = few_shot_curve(name, parts["train"], parts["val"], parts["test"], state, ratios, seeds, configs[seeds[0]])
        write_reports_csv([r.report for r in rows], out / "fewshot.csv")
    _print_reports(reports)
    print(f"outputs: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if not args.ckpt or not args.dataset:
        raise ConfigError("eval needs --ckpt and --dataset")
    cfg.section("data")
    out = _out_dir(args, cfg, "eval")
    state = _load(args.ckpt)
    state.require_stage("repurposed", "adapted")
    task_names = state.registry.names()
    if args.dataset not in task_names:
        raise KeyError(f"dataset {args.dataset!r} is not registered in the checkpoint (has {task_names})")
    part = _load_splits(cfg, args.dataset)[args.split]
    if len(part) == 0:
        raise DataError(f"{args.dataset}: the {args.split} split is empty")
    report = evaluate_dataset(featurize(part, state.backbone), state, args.split, state.seed)
    path = write_reports_csv([report], out / f"eval_{args.dataset}_{args.split}.csv")
    _print_reports([report])
    print(f"outputs: {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else None
    paths = build_report(args.csv_dir, out)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return EXIT_OK


def _print_reports(reports) -> None:
    for r in reports:
        vals = " ".join(f"{k}={v:.4f}" for k, v in r.values().items())
        print(f"{r.dataset} {r.split} seed={r.seed}: {vals}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="formed", description="Frozen-backbone classification for heterogeneous medical time series.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", help="output directory (default: output.dir/<command>)")
        p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, which keeps runs bitwise reproducible)")
        return p

    p = common(sub.add_parser("pretrain", help="pretrain a backbone on a synthetic forecasting corpus"))
    p.add_argument("--seeds", type=_int_list, help="pretraining seed (first value is used)")
    p = common(sub.add_parser("synth", help="write a synthetic cohort to data.root or --out"))
    p.add_argument("--seeds", type=_int_list, help="cohort seed (first value is used)")
    p = common(sub.add_parser("repurpose", help="repurpose a pretrained checkpoint"))
    p.add_argument("--ckpt", help="pretrained checkpoint or run directory")
    p.add_argument("--dataset", help="repurpose on this dataset only")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default: repurpose.seeds)")
    p = common(sub.add_parser("adapt", help="adapt a repurposed checkpoint to a new dataset"))
    p.add_argument("--ckpt", help="repurposed checkpoint or run directory")
    p.add_argument("--dataset", help="name of the new dataset under data.root")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default: adapt.seeds)")
    p.add_argument("--ratios", type=_float_list, help="few-shot training ratios, e.g. 0.1,0.5,1.0")
    p = common(sub.add_parser("eval", help="score one split of a registered dataset"))
    p.add_argument("--ckpt", help="checkpoint or run directory")
    p.add_argument("--dataset", help="registered dataset name")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p = common(sub.add_parser("report", help="aggregate metric CSVs"), config=False)
    p.add_argument("csv_dir", help="directory searched recursively for metric CSVs")
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain,
    "synth": cmd_synth,
    "repurpose": cmd_repurpose,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "report": cmd_report,
}


def _message(exc: BaseException) -> str:
    return str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        get_dtype()
    except ValueError as exc:
        print(f"error: FORMED_PRECISION: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: stage contract: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (DataError, CheckpointError, NonFiniteError, OSError, KeyError, ValueError) as exc:
        print(f"error: {_message(exc)}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
