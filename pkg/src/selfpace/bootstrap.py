"""The uncertainty-estimation ensemble: several networks trained on
class-stratified 90% subsamples of the training set, then applied to the
unlabeled pool to produce one prediction-probability matrix per patch.

Ensemble member i is fully determined by ``base_seed + i`` (its subsample,
its initialization and its shuffling), so results are identical no matter
how many workers run the trainings.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from .dataset import LabeledPatch, UnlabeledPatch
from .errors import DataError, FormatError, ParameterError
from .network import (
    Architecture,
    CnnModel,
    TrainConfig,
    build_model,
    forward_proba_batch,
    train,
)

N_CLASSES = 3


@dataclass
class BootstrapConfig:
    n_networks: int = 10
    subsample_fraction: float = 0.9
    base_seed: int = 0
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    n_workers: int = 1

    def __post_init__(self):
        if self.n_networks < 2:
            raise ParameterError(f"n_networks must be >= 2, got {self.n_networks}")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ParameterError(
                f"subsample_fraction must be in (0,1], got {self.subsample_fraction}"
            )
        if self.n_workers < 1:
            raise ParameterError(f"n_workers must be >= 1, got {self.n_workers}")


@dataclass
class PredictionMatrix:
    patch_id: int
    probs: np.ndarray  # [n_networks, 3]; each row is one network's probability vector

    def column_means(self) -> np.ndarray:
        return self.probs.mean(axis=0)


def subsample(
    patches: list[LabeledPatch], fraction: float, seed: int
) -> list[LabeledPatch]:
    """Class-stratified sampling without replacement: round-half-up of
    fraction*count patches per class, deterministic in the seed."""
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must be in (0,1], got {fraction}")
    by_class: dict[int, list[int]] = {}
    for i, p in enumerate(patches):
        by_class.setdefault(p.label, []).append(i)
    for c in range(N_CLASSES):
        if c not in by_class:
            raise DataError(f"subsample: class {c} has no patches")
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for c in range(N_CLASSES):
        idx = by_class[c]
        k = int(np.floor(fraction * len(idx) + 0.5))  # round half up
        if k < 1:
            raise DataError(f"subsample: fraction {fraction} empties class {c}")
        pick = rng.choice(len(idx), size=k, replace=False)
        chosen.extend(idx[j] for j in pick)
    return [patches[i] for i in chosen]


def _train_member(
    index: int,
    patches: list[LabeledPatch],
    arch: Architecture,
    cfg: BootstrapConfig,
) -> CnnModel:
    seed = cfg.base_seed + index
    try:
        subset = subsample(patches, cfg.subsample_fraction, seed)
        model = build_model(arch, seed)
        train(model, subset, replace(cfg.train_cfg, seed=seed))
        return model
    except Exception as e:
        e.args = (f"ensemble network {index}: {e}",)
        raise


def train_ensemble(
    patches: list[LabeledPatch], arch: Architecture, cfg: BootstrapConfig
) -> list[CnnModel]:
    """Train the n_networks bootstrap members, optionally across worker
    processes. Outputs are collected in member order and do not depend on
    n_workers."""
    indices = range(cfg.n_networks)
    if cfg.n_workers == 1:
        return [_train_member(i, patches, arch, cfg) for i in indices]
    jobs = (delayed(_train_member)(i, patches, arch, cfg) for i in indices)
    return Parallel(n_jobs=cfg.n_workers)(jobs)


def predict_pool(
    ensemble: list[CnnModel], pool: list[UnlabeledPatch], n_workers: int = 1
) -> list[PredictionMatrix]:
    """One [B,3] probability matrix per pool patch, rows in ensemble order."""
    if not ensemble:
        raise ParameterError("predict_pool needs a non-empty ensemble")
    if not pool:
        return []
    pixels = np.stack([p.pixels for p in pool]).astype(np.float64)
    if n_workers > 1:
        all_probs = Parallel(n_jobs=n_workers)(
            delayed(forward_proba_batch)(m, pixels) for m in ensemble
        )
    else:
        all_probs = [forward_proba_batch(m, pixels) for m in ensemble]
    stacked = np.stack(all_probs)  # [B, N, 3]
    return [
        PredictionMatrix(patch_id=p.patch_id, probs=stacked[:, j, :].copy())
        for j, p in enumerate(pool)
    ]


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------

PREDICTION_HEADER = ["patch_id", "network_index", "p_class0", "p_class1", "p_class2"]


def write_prediction_csv(matrices: list[PredictionMatrix], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_HEADER)
        for m in matrices:
            for b in range(m.probs.shape[0]):
                writer.writerow(
                    [m.patch_id, b] + [format(v, ".17g") for v in m.probs[b]]
                )


def read_prediction_csv(path) -> list[PredictionMatrix]:
    rows: dict[int, list[tuple[int, list[float]]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PREDICTION_HEADER:
            raise FormatError(f"unexpected prediction CSV header {header}")
        for line in reader:
            pid, b = int(line[0]), int(line[1])
            rows.setdefault(pid, []).append((b, [float(v) for v in line[2:5]]))
    matrices = []
    for pid in sorted(rows):
        entries = sorted(rows[pid])
        expected = list(range(len(entries)))
        if [b for b, _ in entries] != expected:
            raise FormatError(f"patch {pid}: network indices {[b for b, _ in entries]}")
        matrices.append(PredictionMatrix(pid, np.array([p for _, p in entries])))
    return matrices
