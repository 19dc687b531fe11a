"""Pipeline configuration: defaults, the flat key=value config file format,
and the derivation of every stage seed from the single global seed.

Config files hold one ``section.key=value`` pair per line; ``#`` starts a
comment. Unknown keys are hard errors so a typo cannot silently fall back to
a default.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .network import TrainConfig, Variant
from .selection import FamilyStrategy

# stage seed offsets relative to the global seed; round r is 1-based
SEED_DATA = 0
SEED_BENCHMARK = 1
SEED_SPLIT = 2
SEED_BASELINE_BUILD = 10
SEED_BASELINE_TRAIN = 11
SEED_ROUND_STRIDE = 1000
SEED_RETRAIN_BUILD = 500
SEED_RETRAIN_TRAIN = 501


@dataclass
class PipelineConfig:
    seed: int = 0
    rounds: int = 1
    alphas: tuple[float, ...] = (0.1,)
    variant: Variant = Variant.BASELINE
    family: FamilyStrategy = FamilyStrategy.TWO_FAMILIES
    dropout_rate: float = 0.5
    leaky_slope: float = 0.01
    # synthetic data
    labeled_per_class: int = 600
    pool_size: int = 3000
    benchmark_per_class: int = 200
    noise_sigma: float = 0.12
    mixture_fraction: float = 0.2
    # split
    train_per_class: int = 400
    verify_per_class: int = 200
    # training (baseline, bootstrap members and retraining all share this)
    train: TrainConfig = field(default_factory=TrainConfig)
    # bootstrap
    n_networks: int = 10
    subsample_fraction: float = 0.9
    n_workers: int = 1

    def alpha_for_round(self, round_index: int) -> float:
        """Alpha for 1-based round r; a short list repeats its last entry."""
        return self.alphas[min(round_index - 1, len(self.alphas) - 1)]

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        for a in self.alphas:
            if not 0.0 < a < 1.0:
                raise ConfigError(f"alpha {a} outside (0,1)")
        if self.labeled_per_class < self.train_per_class + self.verify_per_class:
            raise ConfigError(
                f"labeled_per_class={self.labeled_per_class} cannot cover "
                f"train {self.train_per_class} + verify {self.verify_per_class}"
            )
        if self.n_networks < 2:
            raise ConfigError("bootstrap.n_networks must be >= 2")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ConfigError("bootstrap.subsample_fraction must be in (0,1]")
        if self.n_workers < 1:
            raise ConfigError("bootstrap.n_workers must be >= 1")


def _parse_alphas(raw: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in raw.split(","))
    except ValueError as e:
        raise ConfigError(f"bad alpha list {raw!r}: {e}") from e
    if not values:
        raise ConfigError("alpha list is empty")
    return values


def _set(cfg: PipelineConfig, attr: str, value) -> None:
    setattr(cfg, attr, value)


def _set_train(cfg: PipelineConfig, attr: str, value) -> None:
    cfg.train = replace(cfg.train, **{attr: value})


# key -> (converter, setter)
CONFIG_KEYS = {
    "seed": (int, lambda c, v: _set(c, "seed", v)),
    "rounds": (int, lambda c, v: _set(c, "rounds", v)),
    "alpha": (_parse_alphas, lambda c, v: _set(c, "alphas", v)),
    "variant": (Variant, lambda c, v: _set(c, "variant", v)),
    "selection.family": (FamilyStrategy, lambda c, v: _set(c, "family", v)),
    "arch.dropout_rate": (float, lambda c, v: _set(c, "dropout_rate", v)),
    "arch.leaky_slope": (float, lambda c, v: _set(c, "leaky_slope", v)),
    "data.labeled_per_class": (int, lambda c, v: _set(c, "labeled_per_class", v)),
    "data.pool_size": (int, lambda c, v: _set(c, "pool_size", v)),
    "data.benchmark_per_class": (int, lambda c, v: _set(c, "benchmark_per_class", v)),
    "data.noise_sigma": (float, lambda c, v: _set(c, "noise_sigma", v)),
    "data.mixture_fraction": (float, lambda c, v: _set(c, "mixture_fraction", v)),
    "split.train_per_class": (int, lambda c, v: _set(c, "train_per_class", v)),
    "split.verify_per_class": (int, lambda c, v: _set(c, "verify_per_class", v)),
    "train.learning_rate": (float, lambda c, v: _set_train(c, "learning_rate", v)),
    "train.momentum": (float, lambda c, v: _set_train(c, "momentum", v)),
    "train.batch_size": (int, lambda c, v: _set_train(c, "batch_size", v)),
    "train.epochs": (int, lambda c, v: _set_train(c, "epochs", v)),
    "bootstrap.n_networks": (int, lambda c, v: _set(c, "n_networks", v)),
    "bootstrap.subsample_fraction": (float, lambda c, v: _set(c, "subsample_fraction", v)),
    "bootstrap.n_workers": (int, lambda c, v: _set(c, "n_workers", v)),
}


def apply_key(cfg: PipelineConfig, key: str, raw: str) -> None:
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    convert, setter = CONFIG_KEYS[key]
    try:
        setter(cfg, convert(raw))
    except ConfigError:
        raise
    except (ValueError, KeyError) as e:
        raise ConfigError(f"bad value {raw!r} for {key!r}: {e}") from e


def load_config(path: str | Path | None) -> PipelineConfig:
    """Defaults, overridden by the optional config file, then validated."""
    cfg = PipelineConfig()
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = stripped.partition("=")
            apply_key(cfg, key.strip(), raw.strip())
    cfg.validate()
    return cfg
