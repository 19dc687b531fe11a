"""Command-line front end.

Subcommands cover both the staged workflow (gen-data -> train-baseline ->
bootstrap -> select -> retrain -> evaluate, sharing one output directory)
and the closed-loop `pipeline` / `bench` runs. Staged stages use the same
seed derivation as pipeline round 1, so the two paths produce matching
artifacts.

Exit codes: 0 success, 2 config error, 3 data/format error, 4 numeric or
determinism failure.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .bootstrap import (
    BootstrapConfig,
    predict_pool,
    read_prediction_csv,
    train_ensemble,
    write_prediction_csv,
)
from .config import (
    SEED_BASELINE_BUILD,
    SEED_BASELINE_TRAIN,
    SEED_RETRAIN_BUILD,
    SEED_RETRAIN_TRAIN,
    SEED_ROUND_STRIDE,
    PipelineConfig,
    load_config,
)
from .dataset import ORIGIN_VIRTUAL, LabeledPatch, UnlabeledPatch, load_patches, save_patches
from .errors import ConfigError, DataError, DeterminismError
from .network import build_model, load_checkpoint, save_checkpoint, train
from .pipeline import (
    DataBundle,
    architecture,
    benchmark_parallel,
    evaluate_model,
    prepare_data,
    run_baseline,
    run_pipeline,
    select_virtual_samples,
    write_bench_csv,
    write_eval_csv,
)
from .selection import write_selection_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.validate()
    return cfg


def _out_dir(args, create: bool = True) -> Path:
    out = Path(args.out)
    if create:
        out.mkdir(parents=True, exist_ok=True)
    return out


def _load_labeled(path: Path) -> list[LabeledPatch]:
    patches = load_patches(path)
    if patches and not isinstance(patches[0], LabeledPatch):
        raise DataError(f"{path} holds unlabeled patches where labeled ones are needed")
    return patches


def _load_pool(path: Path) -> list[UnlabeledPatch]:
    patches = load_patches(path)
    if patches and not isinstance(patches[0], UnlabeledPatch):
        raise DataError(f"{path} holds labeled patches where the pool is needed")
    return patches


def cmd_gen_data(args) -> None:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    bundle = prepare_data(cfg, out)
    print(
        f"wrote {len(bundle.train)} train, {len(bundle.verify)} verify, "
        f"{len(bundle.benchmark)} benchmark, {len(bundle.pool)} pool patches to {out}"
    )


def cmd_train_baseline(args) -> None:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    bundle = DataBundle(
        train=_load_labeled(out / "train.spcn"),
        verify=_load_labeled(out / "verify.spcn"),
        benchmark=_load_labeled(out / "benchmark.spcn"),
        pool=[],
        pool_truth=None,
    )
    _, report = run_baseline(cfg, bundle, out)
    print(f"baseline accuracy {report.accuracy:.4f} on {len(bundle.benchmark)} benchmark patches")


def cmd_bootstrap(args) -> None:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    train_set = _load_labeled(out / "train.spcn")
    pool = _load_pool(out / "pool.spcn")
    bcfg = BootstrapConfig(
        n_networks=cfg.n_networks,
        subsample_fraction=cfg.subsample_fraction,
        base_seed=cfg.seed + SEED_ROUND_STRIDE,
        train_cfg=cfg.train,
        n_workers=cfg.n_workers,
    )
    ensemble = train_ensemble(train_set, architecture(cfg), bcfg)
    for i, member in enumerate(ensemble):
        save_checkpoint(member, out / f"ensemble_{i:02d}.spck")
    matrices = predict_pool(ensemble, pool, n_workers=cfg.n_workers)
    write_prediction_csv(matrices, out / "predictions.csv")
    print(f"trained {len(ensemble)} networks, predicted {len(matrices)} pool patches")


def cmd_select(args) -> None:
    cfg = _load_cfg(args)
    if not 0.0 < args.alpha < 1.0:
        raise ConfigError(f"--alpha must be in (0,1), got {args.alpha}")
    out = _out_dir(args)
    matrices = read_prediction_csv(out / "predictions.csv")
    pool = _load_pool(out / "pool.spcn")
    report = select_virtual_samples(matrices, pool, args.alpha, cfg.family)
    write_selection_csv(report, out / "selection.csv")
    if report.virtual_samples:
        save_patches(out / "virtual.spcn", report.virtual_samples)
    print(f"selected {report.n_selected} of {len(pool)} pool patches at alpha={args.alpha:g}")


def cmd_retrain(args) -> None:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    train_set = _load_labeled(out / "train.spcn")
    virtual_path = out / "virtual.spcn"
    n_virtual = 0
    if virtual_path.exists():
        virtual = _load_labeled(virtual_path)
        for p in virtual:
            p.origin = ORIGIN_VIRTUAL
        train_set = train_set + virtual
        n_virtual = len(virtual)
    base = cfg.seed + SEED_ROUND_STRIDE
    model = build_model(architecture(cfg), base + SEED_RETRAIN_BUILD)
    train(model, train_set, replace(cfg.train, seed=base + SEED_RETRAIN_TRAIN))
    save_checkpoint(model, out / "retrained.spck")
    print(f"retrained on {len(train_set)} patches ({n_virtual} virtual)")


def cmd_evaluate(args) -> None:
    _load_cfg(args)  # validates config/seed flags even though only data is used
    out = _out_dir(args, create=False)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_absolute():
        ckpt = out / ckpt
    model = load_checkpoint(ckpt)
    benchmark = _load_labeled(out / "benchmark.spcn")
    report = evaluate_model(model, benchmark)
    write_eval_csv(report, out / f"{ckpt.stem}_eval.csv")
    print(f"{ckpt.name}: accuracy {report.accuracy:.4f}")
    for c in range(3):
        print(
            f"  class {c}: precision {report.per_class_precision[c]:.4f} "
            f"recall {report.per_class_recall[c]:.4f}"
        )


def cmd_pipeline(args) -> None:
    cfg = _load_cfg(args)
    if args.rounds is not None:
        cfg.rounds = args.rounds
        cfg.validate()
    out = _out_dir(args)
    result = run_pipeline(cfg, out)
    print(f"baseline accuracy {result.baseline_report.accuracy:.4f}")
    for r in result.rounds:
        print(
            f"round {r.round_index}: selected {r.selection.n_selected}, "
            f"accuracy {r.report.accuracy:.4f}"
        )
    print(f"artifacts in {out}")


def cmd_bench(args) -> None:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    try:
        workers = [int(w) for w in args.workers.split(",") if w.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --workers list {args.workers!r}: {e}") from e
    if not workers or any(w < 1 for w in workers):
        raise ConfigError(f"--workers needs positive integers, got {args.workers!r}")
    entries = benchmark_parallel(cfg, workers)
    write_bench_csv(entries, out / "bench.csv")
    base = entries[0].seconds
    for e in entries:
        print(f"{e.workers:3d} workers: {e.seconds:8.2f}s  speedup {base / e.seconds:.2f}x")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfpace",
        description="Self-paced CNN training with bootstrap-ensemble virtual-sample selection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", default="runs", help="artifact directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "generate the synthetic datasets")
    add("train-baseline", cmd_train_baseline, "train and evaluate the raw network")
    add("bootstrap", cmd_bootstrap, "train the ensemble and predict the pool")
    p = add("select", cmd_select, "promote pool patches to virtual samples")
    p.add_argument("--alpha", type=float, required=True, help="FDR significance level")
    add("retrain", cmd_retrain, "retrain a fresh network on manual + virtual samples")
    p = add("evaluate", cmd_evaluate, "evaluate a checkpoint on the benchmark set")
    p.add_argument("--checkpoint", default="retrained.spck",
                   help="checkpoint file (relative names resolve in --out)")
    p = add("pipeline", cmd_pipeline, "run the full multi-round loop")
    p.add_argument("--rounds", type=int, default=None, help="override the config round count")
    p = add("bench", cmd_bench, "time ensemble training across worker counts")
    p.add_argument("--workers", required=True, help="comma-separated worker counts, e.g. 1,4")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DeterminismError, ValueError, ArithmeticError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
