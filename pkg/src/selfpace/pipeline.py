"""Orchestration of the full loop: train the baseline on the manual samples,
train the bootstrap ensemble, select virtual samples at the configured
significance level, retrain a fresh network on the mixture, evaluate, and
repeat for multiple rounds on the shrinking pool.

Every stage seed derives from the global seed (see config.py), so the whole
run is a pure function of its PipelineConfig and two runs with the same
config produce byte-identical artifacts.
"""

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bootstrap import (
    BootstrapConfig,
    predict_pool,
    train_ensemble,
    write_prediction_csv,
)
from .config import (
    SEED_BASELINE_BUILD,
    SEED_BASELINE_TRAIN,
    SEED_BENCHMARK,
    SEED_DATA,
    SEED_RETRAIN_BUILD,
    SEED_RETRAIN_TRAIN,
    SEED_ROUND_STRIDE,
    SEED_SPLIT,
    PipelineConfig,
)
from .dataset import (
    LabeledPatch,
    SplitSpec,
    SyntheticSpec,
    UnlabeledPatch,
    generate_synthetic,
    save_patches,
    split,
)
from .errors import DataError, DeterminismError
from .network import (
    Architecture,
    CnnModel,
    build_model,
    classify_batch,
    make_architecture,
    save_checkpoint,
    stack_patches,
    train,
)
from .selection import SelectionReport, select_virtual_samples, write_selection_csv

N_CLASSES = 3


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    round_index: int
    accuracy: float
    confusion: np.ndarray            # [3,3], rows true class, columns predicted
    per_class_precision: tuple[float, float, float]
    per_class_recall: tuple[float, float, float]
    n_virtual_used: int


def evaluate_model(
    model: CnnModel,
    benchmark: list[LabeledPatch],
    round_index: int = 0,
    n_virtual_used: int = 0,
) -> EvalReport:
    x, y = stack_patches(benchmark)
    predicted = classify_batch(model, x)
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for t, p in zip(y, predicted):
        confusion[t, p] += 1
    accuracy = float(np.trace(confusion) / confusion.sum())
    col = confusion.sum(axis=0)
    row = confusion.sum(axis=1)
    precision = tuple(
        float(confusion[c, c] / col[c]) if col[c] else 0.0 for c in range(N_CLASSES)
    )
    recall = tuple(
        float(confusion[c, c] / row[c]) if row[c] else 0.0 for c in range(N_CLASSES)
    )
    return EvalReport(round_index, accuracy, confusion, precision, recall, n_virtual_used)


def write_eval_csv(report: EvalReport, path) -> None:
    header = (
        ["round", "n_virtual_used", "accuracy"]
        + [f"precision_{c}" for c in range(N_CLASSES)]
        + [f"recall_{c}" for c in range(N_CLASSES)]
        + [f"cm{t}{p}" for t in range(N_CLASSES) for p in range(N_CLASSES)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerow(
            [report.round_index, report.n_virtual_used, format(report.accuracy, ".17g")]
            + [format(v, ".17g") for v in report.per_class_precision]
            + [format(v, ".17g") for v in report.per_class_recall]
            + [int(v) for v in report.confusion.reshape(-1)]
        )


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

@dataclass
class DataBundle:
    train: list[LabeledPatch]
    verify: list[LabeledPatch]
    benchmark: list[LabeledPatch]
    pool: list[UnlabeledPatch]
    pool_truth: np.ndarray


def synthetic_spec(cfg: PipelineConfig) -> SyntheticSpec:
    n = cfg.labeled_per_class
    return SyntheticSpec(
        counts_per_class=(n, n, n),
        noise_sigma=cfg.noise_sigma,
        mixture_fraction=cfg.mixture_fraction,
        pool_size=cfg.pool_size,
        seed=cfg.seed + SEED_DATA,
    )


def prepare_data(cfg: PipelineConfig, out_dir: Path | None = None) -> DataBundle:
    labeled, pool, truth = generate_synthetic(synthetic_spec(cfg))
    b = cfg.benchmark_per_class
    benchmark, _, _ = generate_synthetic(
        replace(
            synthetic_spec(cfg),
            counts_per_class=(b, b, b),
            pool_size=0,
            seed=cfg.seed + SEED_BENCHMARK,
        )
    )
    train_set, verify = split(
        labeled,
        SplitSpec(cfg.train_per_class, cfg.verify_per_class, seed=cfg.seed + SEED_SPLIT),
    )
    bundle = DataBundle(train_set, verify, benchmark, pool, truth)
    if out_dir is not None:
        save_patches(out_dir / "train.spcn", bundle.train)
        save_patches(out_dir / "verify.spcn", bundle.verify)
        save_patches(out_dir / "benchmark.spcn", bundle.benchmark)
        if bundle.pool:
            save_patches(out_dir / "pool.spcn", bundle.pool)
            # truth lives in its own file, away from the pool every other
            # stage reads
            save_patches(
                out_dir / "pool_truth.spcn",
                [LabeledPatch(p.pixels, int(truth[i])) for i, p in enumerate(bundle.pool)],
            )
    return bundle


def architecture(cfg: PipelineConfig) -> Architecture:
    return make_architecture(cfg.variant, cfg.dropout_rate, cfg.leaky_slope)


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def run_baseline(
    cfg: PipelineConfig, data: DataBundle, out_dir: Path | None = None
) -> tuple[CnnModel, EvalReport]:
    """Train the raw network on the manual samples only and benchmark it."""
    model = build_model(architecture(cfg), cfg.seed + SEED_BASELINE_BUILD)
    train(model, data.train, replace(cfg.train, seed=cfg.seed + SEED_BASELINE_TRAIN),
          verify=data.verify)
    report = evaluate_model(model, data.benchmark, round_index=0, n_virtual_used=0)
    if out_dir is not None:
        save_checkpoint(model, out_dir / "baseline.spck")
        write_eval_csv(report, out_dir / "baseline_eval.csv")
    return model, report


@dataclass
class RoundResult:
    round_index: int
    model: CnnModel
    report: EvalReport
    selection: SelectionReport
    train_set: list[LabeledPatch]
    pool: list[UnlabeledPatch]
    selection_precision: float | None = None  # vs hidden truth, when known


def run_round(
    cfg: PipelineConfig,
    round_index: int,
    train_set: list[LabeledPatch],
    pool: list[UnlabeledPatch],
    benchmark: list[LabeledPatch],
    out_dir: Path | None = None,
    pool_truth: np.ndarray | None = None,
) -> RoundResult:
    """One ensemble -> select -> retrain -> evaluate round. Selected patches
    leave the pool and join the training set as virtual samples; the new
    network is retrained from a fresh initialization on the mixture."""
    if not pool:
        raise DataError(f"round {round_index}: the unlabeled pool is empty")
    base = cfg.seed + SEED_ROUND_STRIDE * round_index
    bcfg = BootstrapConfig(
        n_networks=cfg.n_networks,
        subsample_fraction=cfg.subsample_fraction,
        base_seed=base,
        train_cfg=cfg.train,
        n_workers=cfg.n_workers,
    )
    ensemble = train_ensemble(train_set, architecture(cfg), bcfg)
    matrices = predict_pool(ensemble, pool, n_workers=cfg.n_workers)
    alpha = cfg.alpha_for_round(round_index)
    selection = select_virtual_samples(matrices, pool, alpha, cfg.family)

    selected_ids = {v.patch_id for v in selection.verdicts if v.selected}
    new_pool = [p for p in pool if p.patch_id not in selected_ids]
    new_train = train_set + selection.virtual_samples

    model = build_model(architecture(cfg), base + SEED_RETRAIN_BUILD)
    train(model, new_train, replace(cfg.train, seed=base + SEED_RETRAIN_TRAIN))
    n_virtual = sum(1 for p in new_train if p.origin == "virtual")
    report = evaluate_model(model, benchmark, round_index, n_virtual_used=n_virtual)

    precision = None
    if pool_truth is not None and selection.n_selected > 0:
        by_id = {p.patch_id: i for i, p in enumerate(pool)}
        hits = sum(
            1
            for v in selection.verdicts
            if v.selected and v.candidate_label == pool_truth[by_id[v.patch_id]]
        )
        precision = hits / selection.n_selected

    if out_dir is not None:
        prefix = out_dir / f"round{round_index}"
        for i, member in enumerate(ensemble):
            save_checkpoint(member, f"{prefix}_ensemble_{i:02d}.spck")
        write_prediction_csv(matrices, f"{prefix}_predictions.csv")
        write_selection_csv(selection, f"{prefix}_selection.csv")
        if selection.virtual_samples:
            save_patches(f"{prefix}_virtual.spcn", selection.virtual_samples)
        save_checkpoint(model, f"{prefix}_retrained.spck")
        write_eval_csv(report, f"{prefix}_eval.csv")
    return RoundResult(
        round_index, model, report, selection, new_train, new_pool, precision
    )


@dataclass
class PipelineResult:
    config: PipelineConfig
    baseline_model: CnnModel
    baseline_report: EvalReport
    baseline_pool_accuracy: float | None
    rounds: list[RoundResult] = field(default_factory=list)

    @property
    def reports(self) -> list[EvalReport]:
        return [self.baseline_report] + [r.report for r in self.rounds]


SUMMARY_HEADER = ["round", "alpha", "n_virtual_selected", "n_train_total", "benchmark_accuracy"]


def write_summary(result: PipelineResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        cfg = result.config
        n_manual = 3 * cfg.train_per_class
        writer.writerow(
            [0, "", 0, n_manual, format(result.baseline_report.accuracy, ".17g")]
        )
        total = n_manual
        for r in result.rounds:
            total += r.selection.n_selected
            writer.writerow([
                r.round_index,
                format(cfg.alpha_for_round(r.round_index), "g"),
                r.selection.n_selected,
                total,
                format(r.report.accuracy, ".17g"),
            ])


def run_pipeline(cfg: PipelineConfig, out_dir: Path | None = None) -> PipelineResult:
    """Baseline plus cfg.rounds selection rounds; writes all artifacts under
    out_dir when given."""
    cfg.validate()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg, out_dir)
    baseline_model, baseline_report = run_baseline(cfg, data, out_dir)
    pool_accuracy = None
    if data.pool:
        px = np.stack([p.pixels for p in data.pool])
        pool_accuracy = float(
            (classify_batch(baseline_model, px) == data.pool_truth).mean()
        )
    result = PipelineResult(cfg, baseline_model, baseline_report, pool_accuracy)
    train_set, pool = list(data.train), list(data.pool)
    for r in range(1, cfg.rounds + 1):
        rr = run_round(cfg, r, train_set, pool, data.benchmark, out_dir, data.pool_truth)
        train_set, pool = rr.train_set, rr.pool
        result.rounds.append(rr)
    if out_dir is not None:
        write_summary(result, out_dir / "summary.csv")
    return result


# ---------------------------------------------------------------------------
# parallel-training benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchEntry:
    workers: int
    seconds: float


def benchmark_parallel(cfg: PipelineConfig, worker_counts: list[int]) -> list[BenchEntry]:
    """Time one full ensemble training per worker count. Parameters must be
    bit-identical across counts; a mismatch is a hard determinism failure."""
    data = prepare_data(cfg, out_dir=None)
    arch = architecture(cfg)
    entries: list[BenchEntry] = []
    reference: list[np.ndarray] | None = None
    for workers in worker_counts:
        bcfg = BootstrapConfig(
            n_networks=cfg.n_networks,
            subsample_fraction=cfg.subsample_fraction,
            base_seed=cfg.seed + SEED_ROUND_STRIDE,
            train_cfg=cfg.train,
            n_workers=workers,
        )
        start = time.perf_counter()
        ensemble = train_ensemble(data.train, arch, bcfg)
        entries.append(BenchEntry(workers, time.perf_counter() - start))
        params = [p.value.copy() for m in ensemble for p in m.params]
        if reference is None:
            reference = params
        elif not all(np.array_equal(a, b) for a, b in zip(reference, params)):
            raise DeterminismError(
                f"ensemble parameters with {workers} workers differ from "
                f"{worker_counts[0]}-worker reference"
            )
    return entries


def write_bench_csv(entries: list[BenchEntry], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["workers", "seconds"])
        for e in entries:
            writer.writerow([e.workers, format(e.seconds, ".6f")])
