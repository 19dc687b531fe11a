"""Statistical promotion of pool patches to virtual training samples.

For every patch the ensemble produced a [B,3] probability matrix. The class
with the highest column mean is the candidate label; two one-sided Welch
t-tests ask whether that column's mean significantly exceeds each of the
other two columns. The two p-value families (candidate vs. first runner-up,
candidate vs. second runner-up) are then Benjamini-Hochberg corrected across
the whole pool, and a patch is selected only if both of its tests survive.

Everything here is self-contained: the Student-t CDF is evaluated through
the regularized incomplete beta function with a continued fraction, so the
package needs no statistics library at runtime.
"""

import csv
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dataset import ORIGIN_VIRTUAL, LabeledPatch, UnlabeledPatch
from .errors import DataError, FormatError, ParameterError, StatisticsError

N_CLASSES = 3


# ---------------------------------------------------------------------------
# Student t distribution via the regularized incomplete beta function
# ---------------------------------------------------------------------------

_CF_MAX_ITER = 300
_CF_EPS = 1e-16
_CF_TINY = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction failed for a={a} b={b} x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ParameterError(f"beta parameters must be positive, got a={a} b={b}")
    if not 0.0 <= x <= 1.0:
        raise ParameterError(f"x must be in [0,1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    front = math.exp(
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    # the continued fraction converges fast below the distribution's bulk
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _t_tail(t: float, dof: float) -> float:
    """P(T > t) for t >= 0: half the regularized incomplete beta."""
    x = dof / (dof + t * t)
    return 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, x)


def student_t_cdf(t: float, dof: float) -> float:
    """CDF of Student's t with `dof` degrees of freedom."""
    if dof <= 0:
        raise ParameterError(f"degrees of freedom must be > 0, got {dof}")
    if t == 0.0:
        return 0.5
    if t > 0:
        return 1.0 - _t_tail(t, dof)
    return _t_tail(-t, dof)


def student_t_sf(t: float, dof: float) -> float:
    """Survival function P(T > t), computed without the 1-CDF cancellation."""
    if dof <= 0:
        raise ParameterError(f"degrees of freedom must be > 0, got {dof}")
    if t == 0.0:
        return 0.5
    if t > 0:
        return _t_tail(t, dof)
    return 1.0 - _t_tail(-t, dof)


# ---------------------------------------------------------------------------
# Welch's one-sided two-sample t-test
# ---------------------------------------------------------------------------

@dataclass
class TTestResult:
    t_stat: float
    dof: float
    p_value: float
    degenerate: bool = False


def welch_t_one_sided(a, b) -> TTestResult:
    """Test of mean(a) > mean(b) with Welch-Satterthwaite degrees of freedom.

    When both samples have zero variance the t statistic is undefined; the
    result is then decided by the mean comparison alone (p = 0, 1 or 0.5)
    and flagged degenerate.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise StatisticsError(f"welch test needs >= 2 values per sample, got {na} and {nb}")
    ma, mb = a.mean(), b.mean()
    # constant samples have zero variance by definition; the computed var can
    # carry rounding dust, so detect constancy by value identity
    a_const = bool(np.all(a == a[0]))
    b_const = bool(np.all(b == b[0]))
    if a_const and b_const:
        if a[0] > b[0]:
            return TTestResult(math.inf, math.nan, 0.0, degenerate=True)
        if a[0] < b[0]:
            return TTestResult(-math.inf, math.nan, 1.0, degenerate=True)
        return TTestResult(0.0, math.nan, 0.5, degenerate=True)
    va = 0.0 if a_const else a.var(ddof=1)
    vb = 0.0 if b_const else b.var(ddof=1)
    sa, sb = va / na, vb / nb
    t = (ma - mb) / math.sqrt(sa + sb)
    dof = (sa + sb) ** 2 / (sa * sa / (na - 1) + sb * sb / (nb - 1))
    return TTestResult(t, dof, student_t_sf(t, dof))


# ---------------------------------------------------------------------------
# Benjamini-Hochberg FDR control
# ---------------------------------------------------------------------------

def bh_fdr(p_values, alpha: float) -> list[bool]:
    """Benjamini-Hochberg step-up: find the largest k with
    p_(k) <= k*alpha/m and reject every hypothesis with p <= p_(k).
    Returns the rejection mask in the input order; tied p-values share a
    verdict by construction."""
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must be in (0,1), got {alpha}")
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        return []
    if np.any(p < 0.0) or np.any(p > 1.0) or np.any(np.isnan(p)):
        raise ParameterError("p-values must lie in [0,1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    sorted_p = p[order]
    passed = sorted_p <= alpha * np.arange(1, m + 1) / m
    if not passed.any():
        return [False] * m
    k = int(np.flatnonzero(passed)[-1])
    return (p <= sorted_p[k]).tolist()


# ---------------------------------------------------------------------------
# virtual-sample selection
# ---------------------------------------------------------------------------

class FamilyStrategy(str, Enum):
    """How the per-patch p-values are grouped for FDR control.

    TWO_FAMILIES: one family per runner-up comparison (default).
    POOLED: a single family holding both p-values of every patch.
    MAX_P: one family of per-patch max(p_first, p_second).
    """

    TWO_FAMILIES = "two_families"
    POOLED = "pooled"
    MAX_P = "max_p"


@dataclass
class PatchVerdict:
    patch_id: int
    candidate_label: int          # -1 when the top column means tie exactly
    mean_probs: tuple[float, float, float]
    p_first: float
    p_second: float
    pass_first: bool
    pass_second: bool
    selected: bool


@dataclass
class SelectionReport:
    alpha: float
    strategy: FamilyStrategy
    verdicts: list[PatchVerdict]
    n_selected: int
    virtual_samples: list[LabeledPatch]


def select_virtual_samples(
    matrices,
    pool: list[UnlabeledPatch],
    alpha: float,
    strategy: FamilyStrategy = FamilyStrategy.TWO_FAMILIES,
) -> SelectionReport:
    """Promote pool patches whose candidate label wins both FDR-corrected
    one-sided tests. Patches whose top two column means tie exactly are
    excluded and contribute no hypotheses."""
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must be in (0,1), got {alpha}")
    strategy = FamilyStrategy(strategy)
    if len(matrices) != len(pool):
        raise DataError(f"{len(matrices)} matrices for {len(pool)} pool patches")
    for m, p in zip(matrices, pool):
        if m.patch_id != p.patch_id:
            raise DataError(f"matrix patch_id {m.patch_id} != pool patch_id {p.patch_id}")

    candidates: list[int] = []
    means: list[np.ndarray] = []
    p_first: list[float] = []
    p_second: list[float] = []
    tested: list[int] = []  # positions with a unique candidate
    for pos, m in enumerate(matrices):
        mu = m.probs.mean(axis=0)
        means.append(mu)
        order = sorted(range(N_CLASSES), key=lambda c: (-mu[c], c))
        if mu[order[0]] == mu[order[1]]:  # exact tie: no unique winner
            candidates.append(-1)
            p_first.append(math.nan)
            p_second.append(math.nan)
            continue
        cand, first, second = order
        candidates.append(cand)
        p_first.append(welch_t_one_sided(m.probs[:, cand], m.probs[:, first]).p_value)
        p_second.append(welch_t_one_sided(m.probs[:, cand], m.probs[:, second]).p_value)
        tested.append(pos)

    pass_first = [False] * len(matrices)
    pass_second = [False] * len(matrices)
    if tested:
        p1 = [p_first[i] for i in tested]
        p2 = [p_second[i] for i in tested]
        if strategy is FamilyStrategy.TWO_FAMILIES:
            mask1 = bh_fdr(p1, alpha)
            mask2 = bh_fdr(p2, alpha)
        elif strategy is FamilyStrategy.POOLED:
            mask = bh_fdr(p1 + p2, alpha)
            mask1, mask2 = mask[: len(tested)], mask[len(tested):]
        else:  # MAX_P: rejecting the worse p-value accepts both tests
            mask1 = mask2 = bh_fdr([max(x, y) for x, y in zip(p1, p2)], alpha)
        for j, pos in enumerate(tested):
            pass_first[pos] = mask1[j]
            pass_second[pos] = mask2[j]

    verdicts: list[PatchVerdict] = []
    virtual: list[LabeledPatch] = []
    for pos, (m, patch) in enumerate(zip(matrices, pool)):
        selected = pass_first[pos] and pass_second[pos]
        verdicts.append(
            PatchVerdict(
                patch_id=m.patch_id,
                candidate_label=candidates[pos],
                mean_probs=tuple(float(v) for v in means[pos]),
                p_first=p_first[pos],
                p_second=p_second[pos],
                pass_first=pass_first[pos],
                pass_second=pass_second[pos],
                selected=selected,
            )
        )
        if selected:
            virtual.append(
                LabeledPatch(patch.pixels, candidates[pos], origin=ORIGIN_VIRTUAL)
            )
    return SelectionReport(
        alpha=alpha,
        strategy=strategy,
        verdicts=verdicts,
        n_selected=sum(v.selected for v in verdicts),
        virtual_samples=virtual,
    )


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------

SELECTION_HEADER = [
    "patch_id", "candidate_label", "mean_p0", "mean_p1", "mean_p2",
    "p_first", "p_second", "pass_first", "pass_second", "selected",
]


def write_selection_csv(report: SelectionReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SELECTION_HEADER)
        for v in report.verdicts:
            writer.writerow([
                v.patch_id,
                v.candidate_label,
                *(format(x, ".17g") for x in v.mean_probs),
                format(v.p_first, ".17g"),
                format(v.p_second, ".17g"),
                int(v.pass_first),
                int(v.pass_second),
                int(v.selected),
            ])


def read_selection_csv(path) -> list[PatchVerdict]:
    verdicts = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SELECTION_HEADER:
            raise FormatError(f"unexpected selection CSV header {header}")
        for line in reader:
            verdicts.append(PatchVerdict(
                patch_id=int(line[0]),
                candidate_label=int(line[1]),
                mean_probs=(float(line[2]), float(line[3]), float(line[4])),
                p_first=float(line[5]),
                p_second=float(line[6]),
                pass_first=bool(int(line[7])),
                pass_second=bool(int(line[8])),
                selected=bool(int(line[9])),
            ))
    return verdicts
