"""Evaluation statistics: ROC AUC, multi-run aggregation, correlation, and a
two-sample t-test from summary statistics.

The AUC uses the rank-sum (Mann-Whitney) formulation with average ranks for
ties, which runs in O(n log n) and credits tied score pairs with 1/2.  The
t-test operates on (mean, std, n) summaries so published results can be
compared without raw per-run values; its p-value comes from the regularized
incomplete beta form of the t-distribution tail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special, stats

from .errors import DegenerateTestError, UndefinedAUCError, ZeroVarianceError

__all__ = [
    "RunAggregate",
    "TTestResult",
    "aggregate_runs",
    "pearson_r",
    "roc_auc",
    "t_tail_probability",
    "ttest_from_summary",
]


@dataclass(frozen=True)
class RunAggregate:
    """Mean and sample spread of one metric over repeated runs."""

    metric: str
    mean: float
    std: float
    n: int


@dataclass(frozen=True)
class TTestResult:
    """Outcome of a two-sample pooled-variance t-test."""

    t: float
    df: int
    p: float
    tails: int


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve for binary ``labels`` scored by ``scores``.

    Equals the probability that a uniformly drawn positive outscores a
    uniformly drawn negative, with ties counted as 1/2.  Computed from the
    rank sum of the positives using average ranks, so tied blocks are handled
    without enumerating pairs.

    Raises ``UndefinedAUCError`` when only one class is present and
    ``ValueError`` on length mismatch or non-binary labels.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(
            f"scores and labels must have equal length, got {scores.shape[0]} and {labels.shape[0]}"
        )
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must contain only 0 and 1")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(
            f"AUC is undefined with {n_pos} positives and {n_neg} negatives"
        )
    ranks = stats.rankdata(scores, method="average")
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def aggregate_runs(values: Sequence[float], metric: str = "value") -> RunAggregate:
    """Aggregate one metric across repeated runs.

    Returns the mean and the sample standard deviation (n - 1 denominator).
    With a single run the spread is undefined and reported as NaN.
    """
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot aggregate zero runs")
    if not np.isfinite(arr).all():
        raise ValueError("run values must be finite")
    if np.all(arr == arr[0]):
        mean, std = float(arr[0]), 0.0
    else:
        mean = float(arr.mean())
        std = float(math.sqrt(np.sum((arr - mean) ** 2) / (arr.size - 1)))
    if arr.size == 1:
        std = float("nan")
    return RunAggregate(metric=metric, mean=mean, std=std, n=int(arr.size))


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    """Product-moment correlation between two equal-length sequences.

    Raises ``ZeroVarianceError`` when either input is constant, and
    ``ValueError`` for fewer than two points or mismatched lengths.
    """
    xa = np.asarray(x, dtype=np.float64).ravel()
    ya = np.asarray(y, dtype=np.float64).ravel()
    if xa.shape != ya.shape:
        raise ValueError(f"inputs must have equal length, got {xa.size} and {ya.size}")
    if xa.size < 2:
        raise ValueError("correlation needs at least two points")
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    sx = float(np.sum(dx * dx))
    sy = float(np.sum(dy * dy))
    if sx == 0.0 or sy == 0.0:
        raise ZeroVarianceError("correlation is undefined for constant input")
    r = float(np.sum(dx * dy) / math.sqrt(sx * sy))
    return min(1.0, max(-1.0, r))


def t_tail_probability(t: float, df: int) -> float:
    """P(T_df >= t) via the regularized incomplete beta function.

    For x = df / (df + t^2), the two-sided tail mass is I_x(df/2, 1/2); half
    of it lies above |t|.  Accurate to well below 1e-10 for df <= 100.
    """
    if df < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {df}")
    x = df / (df + t * t)
    half_two_sided = 0.5 * float(special.betainc(df / 2.0, 0.5, x))
    return half_two_sided if t >= 0 else 1.0 - half_two_sided


def ttest_from_summary(
    mean1: float,
    std1: float,
    n1: int,
    mean2: float,
    std2: float,
    n2: int,
    tails: int = 1,
) -> TTestResult:
    """Two-sample pooled-variance t-test from summary statistics.

    ``tails=1`` tests whether group 1's mean exceeds group 2's (p is the
    probability of a t at least as large under the null); ``tails=2`` tests
    for any difference.  Requires n >= 2 per group and at least one positive
    standard deviation; otherwise ``DegenerateTestError`` is raised.
    """
    if tails not in (1, 2):
        raise ValueError(f"tails must be 1 or 2, got {tails}")
    if std1 < 0 or std2 < 0:
        raise ValueError("standard deviations must be non-negative")
    if n1 < 2 or n2 < 2:
        raise DegenerateTestError(f"each group needs n >= 2, got n1={n1}, n2={n2}")
    df = n1 + n2 - 2
    pooled_var = ((n1 - 1) * std1 * std1 + (n2 - 1) * std2 * std2) / df
    if pooled_var == 0.0:
        raise DegenerateTestError("pooled variance is zero; t is undefined")
    se = math.sqrt(pooled_var * (1.0 / n1 + 1.0 / n2))
    t = (mean1 - mean2) / se
    if tails == 1:
        p = t_tail_probability(t, df)
    else:
        p = 2.0 * t_tail_probability(abs(t), df)
    return TTestResult(t=t, df=df, p=min(p, 1.0), tails=tails)
