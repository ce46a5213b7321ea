"""Dated data streams: day batches, task segmentation, synthetic drift, CSV I/O."""

from __future__ import annotations

import contextlib
import contextvars
import csv
import io
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .io import write_text

__all__ = [
    "LookaheadError",
    "StreamFormatError",
    "DayBatch",
    "Task",
    "Regime",
    "DriftScenario",
    "label_horizon",
    "label_access_log",
    "compute_trend_labels",
    "segment_tasks",
    "make_scenario",
    "generate_stream",
    "write_csv",
    "load_csv",
    "write_regime_log",
    "stack_batches",
    "subseed",
    "regime_ids",
]

SCENARIO_KINDS = ("recurring-cycle", "random-walk", "mixed")


class LookaheadError(RuntimeError):
    """A label dated at or after the current horizon was read."""


class StreamFormatError(ValueError):
    pass


def subseed(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose derived from one master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


# ------------------------------------------------------------------ label guard

_HORIZON: contextvars.ContextVar[int | None] = contextvars.ContextVar("label_horizon", default=None)
_ACCESS_LOG: contextvars.ContextVar[list | None] = contextvars.ContextVar("label_access_log", default=None)


@contextlib.contextmanager
def label_horizon(first_hidden_date: int | None) -> Iterator[None]:
    """Forbid reading labels dated ``>= first_hidden_date`` inside the block."""
    token = _HORIZON.set(first_hidden_date)
    try:
        yield
    finally:
        _HORIZON.reset(token)


@contextlib.contextmanager
def label_access_log() -> Iterator[list[int]]:
    """Record the date of every label read inside the block."""
    log: list[int] = []
    token = _ACCESS_LOG.set(log)
    try:
        yield log
    finally:
        _ACCESS_LOG.reset(token)


class DayBatch:
    """One date's cross-section: features (n x d), optional labels (n,), symbols."""

    __slots__ = ("date", "features", "symbols", "_labels")

    def __init__(self, date: int, features, labels=None, symbols: Sequence[str] | None = None):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 1:
            raise StreamFormatError(f"date {date}: features must be a non-empty n x d matrix")
        n = features.shape[0]
        if labels is not None:
            labels = np.asarray(labels, dtype=np.float64).reshape(-1)
            if labels.shape[0] != n:
                raise StreamFormatError(f"date {date}: {labels.shape[0]} labels for {n} rows")
            if not np.all(np.isfinite(labels)):
                raise StreamFormatError(f"date {date}: non-finite label")
        if symbols is None:
            symbols = tuple(f"S{i:04d}" for i in range(n))
        symbols = tuple(str(s) for s in symbols)
        if len(symbols) != n:
            raise StreamFormatError(f"date {date}: {len(symbols)} symbols for {n} rows")
        self.date = int(date)
        self.features = features
        self.symbols = symbols
        self._labels = labels

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    @property
    def labels(self) -> np.ndarray | None:
        horizon = _HORIZON.get()
        if horizon is not None and self.date >= horizon:
            raise LookaheadError(f"label of date {self.date} read before horizon {horizon}")
        log = _ACCESS_LOG.get()
        if log is not None:
            log.append(self.date)
        return self._labels

    def without_labels(self) -> "DayBatch":
        return DayBatch(self.date, self.features, None, self.symbols)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DayBatch):
            return NotImplemented
        if self.date != other.date or self.symbols != other.symbols:
            return False
        if not np.array_equal(self.features, other.features):
            return False
        if (self._labels is None) != (other._labels is None):
            return False
        return self._labels is None or np.array_equal(self._labels, other._labels)

    def __repr__(self) -> str:
        return f"DayBatch(date={self.date}, n={self.n}, d={self.d}, labeled={self.has_labels})"


def stack_batches(batches: Sequence[DayBatch], labels: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Concatenate rows of several dates into one (X, y) pair."""
    if not batches:
        raise ValueError("no day batches to stack")
    X = np.concatenate([b.features for b in batches], axis=0)
    if not labels:
        return X, None
    ys = []
    for b in batches:
        y = b.labels
        if y is None:
            raise ValueError(f"date {b.date} is unlabeled")
        ys.append(y)
    return X, np.concatenate(ys).reshape(-1, 1)


@dataclass
class Task:
    """One adaptation period: latest labeled window, upcoming window, prior tasks."""

    index: int
    train: list[DayBatch]
    test: list[DayBatch]
    history: list[int]

    @property
    def train_dates(self) -> list[int]:
        return [b.date for b in self.train]

    @property
    def test_dates(self) -> list[int]:
        return [b.date for b in self.test]

    @property
    def test_start(self) -> int | None:
        return self.test[0].date if self.test else None


def compute_trend_labels(prices: dict[str, Sequence[float]] | Sequence[float]):
    """Relative price change to the next date.

    Accepts one series or a mapping of symbol -> series; the last date of a
    series has no label.
    """
    if isinstance(prices, dict):
        return {sym: compute_trend_labels(series) for sym, series in prices.items()}
    p = np.asarray(prices, dtype=np.float64)
    if p.size and np.any(~(p > 0)):
        raise ValueError("prices must be strictly positive")
    if p.size < 2:
        return np.empty(0)
    return (p[1:] - p[:-1]) / p[:-1]


def segment_tasks(stream: Sequence[DayBatch], t_ada: int = 15) -> list[Task]:
    """Cut a date-sorted stream into consecutive adaptation tasks.

    Dates are chunked into windows of ``t_ada`` (the last may be shorter).
    Task ``i`` trains on window ``i`` and is tested on window ``i + 1``, so the
    test window of one task is the training window of the next.  A labeled
    final window yields a last task with an empty test window.
    """
    if t_ada < 1:
        raise ValueError("t_ada must be >= 1")
    dates = [b.date for b in stream]
    for a, b in zip(dates, dates[1:]):
        if b <= a:
            kind = "duplicate" if a == b else "unsorted"
            raise StreamFormatError(f"{kind} dates in stream near date {b}")
    windows = [list(stream[i : i + t_ada]) for i in range(0, len(stream), t_ada)]
    tasks = [
        Task(index=i, train=windows[i], test=windows[i + 1], history=list(range(i)))
        for i in range(len(windows) - 1)
    ]
    # the last window has no successor; if it is already labeled it still
    # forms a training window, so every labeled date is trained on exactly once
    if windows and all(b.has_labels for b in windows[-1]):
        k = len(windows) - 1
        tasks.append(Task(index=k, train=windows[k], test=[], history=list(range(k))))
    return tasks


# ------------------------------------------------------------ synthetic drift


@dataclass
class Regime:
    """Linear ground truth: y = x.w + bias + N(0, noise^2), with x ~ N(shift, I)."""

    weights: np.ndarray
    bias: float = 0.0
    noise: float = 0.0
    shift: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.shift is not None:
            self.shift = np.asarray(self.shift, dtype=np.float64).reshape(-1)
            if self.shift.shape != self.weights.shape:
                raise ValueError("regime shift and weights differ in dimension")


@dataclass
class DriftScenario:
    regimes: list[Regime]
    schedule: np.ndarray  # regime id per generated date
    kind: str = "recurring-cycle"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.regimes:
            raise ValueError("scenario needs at least one regime")
        self.schedule = np.asarray(self.schedule, dtype=np.int64)
        if self.schedule.size and (self.schedule.min() < 0 or self.schedule.max() >= len(self.regimes)):
            raise ValueError("schedule references an unknown regime")
        dims = {r.weights.size for r in self.regimes}
        if len(dims) != 1:
            raise ValueError("regimes disagree on feature dimension")

    @property
    def d(self) -> int:
        return self.regimes[0].weights.size

    @property
    def n_dates(self) -> int:
        return int(self.schedule.size)


def _random_weights(rng: np.random.Generator, d: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=d) / math.sqrt(d)


def make_scenario(
    kind: str,
    n_dates: int,
    d: int,
    seed: int,
    *,
    n_regimes: int = 2,
    block: int = 15,
    noise: float = 0.5,
    shift: float = 0.0,
    step: float = 0.3,
    bias: float = 0.0,
) -> DriftScenario:
    """Build one of the stock drift scenarios.

    recurring-cycle
        ``n_regimes`` fixed regimes visited in turn, each for ``block`` dates.
    random-walk
        every block gets a fresh regime whose weights (and feature shift) take a
        Gaussian step of relative size ``step`` from the previous block; nothing
        recurs.
    mixed
        the recurring cycle plus a slowly accumulating random-walk component
        (step scaled by 1/2); regime ids follow the cycle.

    ``shift`` is the per-dimension standard deviation of each regime's feature
    mean offset.  Zero keeps features standard normal in every regime.
    """
    if kind not in SCENARIO_KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}; expected one of {SCENARIO_KINDS}")
    if n_dates < 1 or d < 1 or block < 1 or n_regimes < 1:
        raise ValueError("n_dates, d, block and n_regimes must be >= 1")
    rng = subseed(seed, "scenario")
    n_blocks = -(-n_dates // block)
    block_of_date = np.arange(n_dates) // block

    def offset():
        return rng.normal(0.0, shift, size=d) if shift > 0 else np.zeros(d)

    if kind == "recurring-cycle":
        regimes = [Regime(_random_weights(rng, d), bias, noise, offset()) for _ in range(n_regimes)]
        schedule = block_of_date % n_regimes
    elif kind == "random-walk":
        w, mu = _random_weights(rng, d), offset()
        regimes = []
        for _ in range(n_blocks):
            regimes.append(Regime(w.copy(), bias, noise, mu.copy()))
            w = w + step * rng.normal(0.0, 1.0, size=d) * np.sqrt(1.0 / (3.0 * d))
            mu = mu + step * offset()
        schedule = block_of_date
    else:
        base = [(_random_weights(rng, d), offset()) for _ in range(n_regimes)]
        walk_w, walk_mu = np.zeros(d), np.zeros(d)
        regimes = []
        for b in range(n_blocks):
            w0, mu0 = base[b % n_regimes]
            regimes.append(Regime(w0 + walk_w, bias, noise, mu0 + walk_mu))
            walk_w = walk_w + 0.5 * step * rng.normal(0.0, 1.0, size=d) * np.sqrt(1.0 / (3.0 * d))
            walk_mu = walk_mu + 0.5 * step * offset()
        schedule = block_of_date
    meta = {"block": block, "n_regimes": n_regimes}
    if kind != "recurring-cycle":
        meta["cycle_id"] = [b % n_regimes if kind == "mixed" else b for b in range(n_blocks)]
    return DriftScenario(regimes=regimes, schedule=schedule, kind=kind, seed=seed, meta=meta)


def regime_ids(scenario: DriftScenario) -> np.ndarray:
    """Ground-truth regime label per date as logged (mixed scenarios log the cycle id)."""
    if scenario.kind == "mixed":
        cycle = np.asarray(scenario.meta["cycle_id"])
        return cycle[scenario.schedule]
    return scenario.schedule.copy()


def generate_stream(
    scenario: DriftScenario, n_symbols: int, seed: int | None = None
) -> tuple[list[DayBatch], np.ndarray]:
    """Draw one DayBatch per scheduled date and return it with the regime log."""
    if n_symbols < 1 or scenario.n_dates < 1:
        raise ValueError("need at least one date and one symbol")
    rng = subseed(scenario.seed if seed is None else seed, "data")
    d = scenario.d
    symbols = tuple(f"S{i:04d}" for i in range(n_symbols))
    stream = []
    for t, r in enumerate(scenario.schedule):
        regime = scenario.regimes[r]
        X = rng.standard_normal((n_symbols, d))
        if regime.shift is not None:
            X = X + regime.shift
        eps = rng.standard_normal(n_symbols)
        y = X @ regime.weights + regime.bias + regime.noise * eps
        stream.append(DayBatch(t, X, y, symbols))
    return stream, regime_ids(scenario)


# ------------------------------------------------------------------ CSV I/O


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(batches: Iterable[DayBatch], path, atomic: bool = True) -> None:
    """Write ``date,symbol,f0..f{d-1}[,label]`` rows (shortest round-trip floats)."""
    batches = list(batches)
    if not batches:
        raise ValueError("nothing to write")
    d = batches[0].d
    labeled = batches[0].has_labels
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["date", "symbol", *[f"f{j}" for j in range(d)], *(["label"] if labeled else [])])
    for b in batches:
        if b.d != d or b.has_labels != labeled:
            raise StreamFormatError(f"date {b.date}: inconsistent width or labeling")
        y = b._labels
        for i in range(b.n):
            row = [str(b.date), b.symbols[i], *map(_fmt, b.features[i])]
            if labeled:
                row.append(_fmt(y[i]))
            w.writerow(row)
    write_text(path, buf.getvalue(), atomic=atomic)


def load_csv(path, zscore: bool = False) -> list[DayBatch]:
    """Read a stream CSV; errors carry the offending line number."""
    text = Path(path).read_text()
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if not header:
        raise StreamFormatError("missing header")
    if header[:2] != ["date", "symbol"]:
        raise StreamFormatError("line 1: header must start with date,symbol")
    labeled = header[-1] == "label"
    feat_cols = header[2 : len(header) - (1 if labeled else 0)]
    if not feat_cols:
        raise StreamFormatError("line 1: missing feature columns")
    if feat_cols != [f"f{j}" for j in range(len(feat_cols))]:
        raise StreamFormatError("line 1: feature columns must be f0..f{d-1}")
    width = len(header)
    by_date: dict[int, tuple[list, list, list]] = {}
    order: list[int] = []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != width:
            raise StreamFormatError(f"line {lineno}: expected {width} fields, got {len(row)}")
        try:
            date = int(row[0])
            vals = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise StreamFormatError(f"line {lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise StreamFormatError(f"line {lineno}: non-finite value")
        if date not in by_date:
            by_date[date] = ([], [], [])
            order.append(date)
        syms, feats, labs = by_date[date]
        syms.append(row[1])
        feats.append(vals[: len(feat_cols)])
        if labeled:
            labs.append(vals[-1])
    if order != sorted(order):
        raise StreamFormatError("rows are not grouped by ascending date")
    batches = [
        DayBatch(t, np.array(by_date[t][1]), np.array(by_date[t][2]) if labeled else None, by_date[t][0])
        for t in order
    ]
    # z-scoring uses whole-file statistics, i.e. it looks ahead in the features
    if zscore and batches:
        X = np.concatenate([b.features for b in batches])
        mu, sd = X.mean(axis=0), X.std(axis=0)
        sd[sd == 0] = 1.0
        batches = [DayBatch(b.date, (b.features - mu) / sd, b._labels, b.symbols) for b in batches]
    return batches


def write_regime_log(regimes: Sequence[int], path, dates: Sequence[int] | None = None) -> None:
    dates = range(len(regimes)) if dates is None else dates
    lines = ["date,regime_id"] + [f"{t},{int(r)}" for t, r in zip(dates, regimes)]
    write_text(path, "\n".join(lines) + "\n")
