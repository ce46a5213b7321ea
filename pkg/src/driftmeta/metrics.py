"""Forecast evaluation: daily IC / rank IC, a top-k portfolio, Friedman ranks.

Undefined correlations (a constant vector, or fewer than two names) are
reported as ``None``; they are excluded from means and counted separately.
Standard deviations use the n - 1 denominator throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "DailyEval",
    "ICSummary",
    "pearson",
    "spearman",
    "ic_series",
    "information_ratio",
    "topk_portfolio",
    "friedman_ranks",
    "TRADING_DAYS",
]

TRADING_DAYS = 252


def pearson(a, b) -> float | None:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        return None
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(da @ da))
    sb = math.sqrt(float(db @ db))
    # relative tolerance: float round-off can leave a tiny spread in a constant vector
    if sa <= 1e-14 * max(1.0, float(np.abs(a).max())) * math.sqrt(a.size):
        return None
    if sb <= 1e-14 * max(1.0, float(np.abs(b).max())) * math.sqrt(b.size):
        return None
    r = float(da @ db) / (sa * sb)
    # exact (anti-)collinearity should read as exactly +-1, not 1 - 2 ulp
    if abs(abs(r) - 1.0) <= 8 * np.finfo(np.float64).eps:
        return math.copysign(1.0, r)
    return r


def spearman(a, b) -> float | None:
    """Pearson correlation of average ranks."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        return None
    return pearson(rankdata(a), rankdata(b))


def information_ratio(values: Sequence[float]) -> float | None:
    """mean / sample std, or None when the std is zero or undefined."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return None
    sd = float(v.std(ddof=1))
    if sd == 0.0 or not math.isfinite(sd):
        return None
    return float(v.mean()) / sd


@dataclass
class DailyEval:
    date: int
    scores: np.ndarray
    labels: np.ndarray
    ic: float | None
    ric: float | None


@dataclass
class ICSummary:
    ic: float
    icir: float | None
    ric: float | None
    ricir: float | None
    n_valid: int
    n_undefined: int
    days: list[DailyEval] = field(default_factory=list, repr=False)


def ic_series(predictions: Sequence[tuple[int, np.ndarray, np.ndarray]]) -> ICSummary:
    """Aggregate (date, scores, realized) triples into IC / ICIR / RIC / RICIR."""
    days = []
    for date, scores, labels in predictions:
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(labels, dtype=np.float64).reshape(-1)
        days.append(DailyEval(int(date), scores, labels, pearson(scores, labels), spearman(scores, labels)))
    ics = [d.ic for d in days if d.ic is not None]
    rics = [d.ric for d in days if d.ric is not None]
    if not ics:
        raise ValueError("no date has a defined IC")
    return ICSummary(
        ic=float(np.mean(ics)),
        icir=information_ratio(ics),
        ric=float(np.mean(rics)) if rics else None,
        ricir=information_ratio(rics),
        n_valid=len(ics),
        n_undefined=len(days) - len(ics),
        days=days,
    )


@dataclass
class PortfolioResult:
    dates: list[int]
    returns: np.ndarray  # mean realized trend of the top-k names per date
    benchmark: np.ndarray  # equal-weight mean over the whole universe
    excess: np.ndarray
    ear: float
    earir: float | None
    strategy: str = "topk-simplified"


def topk_portfolio(
    predictions: Sequence[tuple[int, np.ndarray, np.ndarray]], k: int = 30
) -> PortfolioResult:
    """Equal-weight the k highest-scored names each date; no holding or costs.

    Ties in score are broken by position (stable sort), so any strictly
    increasing transform of the scores selects the same names.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    dates, rets, bench = [], [], []
    for date, scores, labels in predictions:
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(labels, dtype=np.float64).reshape(-1)
        if k > scores.size:
            raise ValueError(f"date {date}: k={k} exceeds universe of {scores.size} names")
        top = np.argsort(-scores, kind="stable")[:k]
        dates.append(int(date))
        rets.append(float(labels[top].mean()))
        bench.append(float(labels.mean()))
    rets_a, bench_a = np.array(rets), np.array(bench)
    excess = rets_a - bench_a
    ir = information_ratio(excess)
    return PortfolioResult(
        dates=dates,
        returns=rets_a,
        benchmark=bench_a,
        excess=excess,
        ear=TRADING_DAYS * float(excess.mean()) if excess.size else 0.0,
        earir=None if ir is None else ir * math.sqrt(TRADING_DAYS),
    )


@dataclass
class FriedmanResult:
    ranks: np.ndarray  # methods x scenarios, 1 = best
    mean_ranks: np.ndarray
    statistic: float
    methods: list[str] | None = None


def friedman_ranks(table, methods: Sequence[str] | None = None) -> FriedmanResult:
    """Rank methods (rows) within each scenario (column); higher score ranks first.

    The statistic is the textbook (tie-uncorrected) Friedman chi-square
    12 N / (k (k + 1)) * sum_j (R_j - (k + 1) / 2)^2 over mean ranks R_j.
    """
    rows = [list(r) for r in table]
    if len({len(r) for r in rows}) > 1:
        raise ValueError("ragged score table")
    T = np.asarray(rows, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] < 1 or T.shape[1] < 1:
        raise ValueError("score table must be methods x scenarios")
    k, n = T.shape
    ranks = np.column_stack([rankdata(-T[:, j]) for j in range(n)])
    mean_ranks = ranks.mean(axis=1)
    stat = 12.0 * n / (k * (k + 1)) * float(np.sum((mean_ranks - (k + 1) / 2.0) ** 2)) if k > 1 else 0.0
    return FriedmanResult(ranks, mean_ranks, stat, list(methods) if methods is not None else None)
