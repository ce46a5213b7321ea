"""Meta-learning based incremental learning engine.

One adaptation cycle per task:

1. ``adapt_step``   one plain SGD step of the forecaster on the adapted
                    adaptation set (adapters untouched);
2. ``predict_task`` adapt data -> forecaster -> invert labels;
3. ``online_step``  once the test labels arrive, one Adam step on
                    MSE + label-adaptation regulariser.  Gradients are taken at
                    the adapted parameters and applied to the pre-adaptation
                    ones.

A state with ``adapters=None`` runs the plain IL baseline through the same
cycle without any adapter arithmetic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterParams, adapt_data, adapt_labels, data_beta, invert_labels, label_beta
from .autodiff import AdamState, Tape
from .metrics import pearson
from .models import Forecaster
from .stream import DayBatch, Task, label_horizon, stack_batches

__all__ = [
    "ModelState",
    "CycleResult",
    "EarlyStopping",
    "adaptation_loss",
    "online_loss",
    "adapt_step",
    "predict_task",
    "online_step",
    "run_cycle",
    "run_tasks",
    "train_forecaster",
]

log = logging.getLogger(__name__)


@dataclass
class ModelState:
    forecaster: Forecaster
    adapters: AdapterParams | None = None
    opt_f: AdamState = field(default_factory=AdamState)
    opt_a: AdamState = field(default_factory=AdamState)
    lr: float = 1e-3
    lr_adapter: float = 1e-2
    lr_inner: float | None = None

    @property
    def inner_lr(self) -> float:
        return self.lr if self.lr_inner is None else self.lr_inner

    def copy(self) -> "ModelState":
        return ModelState(
            self.forecaster.clone(),
            None if self.adapters is None else self.adapters.copy(),
            self.opt_f.copy(),
            self.opt_a.copy(),
            self.lr,
            self.lr_adapter,
            self.lr_inner,
        )


# ------------------------------------------------------------------- losses


def adaptation_loss(forecaster: Forecaster, adapters: AdapterParams | None, X, G) -> ad.Tensor:
    """MSE of the forecaster on adapted data against adapted labels."""
    if adapters is not None:
        X_t = adapt_data(X, adapters)
        G_t = adapt_labels(G, X, adapters)
    else:
        X_t, G_t = X, G
    return ad.mse(forecaster.predict(X_t), G_t)


def forward(forecaster: Forecaster, adapters: AdapterParams | None, X) -> ad.Tensor:
    """Full model output in the original label space."""
    if adapters is None:
        return forecaster.predict(X)
    return invert_labels(forecaster.predict(adapt_data(X, adapters, data_beta(X, adapters))), X, adapters)


def online_loss(forecaster: Forecaster, adapters: AdapterParams | None, X, G) -> ad.Tensor:
    """MSE(F(X), G) + 0.5 * mean ||G - G~||^2."""
    if adapters is None:
        return ad.mse(forecaster.predict(X), G)
    beta_l = label_beta(X, adapters)
    pred = invert_labels(forecaster.predict(adapt_data(X, adapters)), X, adapters, beta_l)
    G_t = adapt_labels(G, X, adapters, beta_l)
    return ad.add(ad.mse(pred, G), ad.scale(ad.mse(G, G_t), 0.5))


# --------------------------------------------------------------- one cycle


def adapt_step(state: ModelState, batches: Sequence[DayBatch]) -> ModelState:
    """Return the adapted state: forecaster moved one SGD step, adapters shared."""
    if not batches:
        raise ValueError("empty adaptation set")
    X, G = stack_batches(batches)
    if state.adapters is not None:
        # adapted inputs and targets are constants for this step
        X_t = adapt_data(X, state.adapters).value
        G_t = adapt_labels(G, X, state.adapters).value
    else:
        X_t, G_t = X, G
    fc = state.forecaster.clone()
    params = fc.parameters()
    with Tape() as tape:
        loss = ad.mse(fc.predict(X_t), G_t)
        grads = tape.backward(loss, params)
    ad.sgd_step(params, grads, state.inner_lr)
    return ModelState(fc, state.adapters, state.opt_f, state.opt_a, state.lr, state.lr_adapter, state.lr_inner)


def predict_task(state: ModelState, batches: Sequence[DayBatch]) -> list[np.ndarray]:
    """Scores per date (1-D arrays aligned with each batch's rows)."""
    if not batches:
        return []
    X, _ = stack_batches(batches, labels=False)
    out = forward(state.forecaster, state.adapters, X).value.reshape(-1)
    bounds = np.cumsum([0] + [b.n for b in batches])
    return [out[bounds[i] : bounds[i + 1]].copy() for i in range(len(batches))]


def online_step(prev: ModelState, adapted: ModelState, batches: Sequence[DayBatch]) -> tuple[ModelState, float]:
    """New pre-adaptation state after the labels of ``batches`` arrive.

    Returns the state and the online loss evaluated at the adapted parameters.
    """
    X, G = stack_batches(batches)
    f_params = adapted.forecaster.parameters()
    a_params = [] if adapted.adapters is None else adapted.adapters.parameters()
    with Tape() as tape:
        loss = online_loss(adapted.forecaster, adapted.adapters, X, G)
        grads = tape.backward(loss, f_params + a_params)
    new = prev.copy()
    ad.adam_step(new.forecaster.parameters(), grads[: len(f_params)], new.opt_f, prev.lr)
    if new.adapters is not None:
        ad.adam_step(new.adapters.parameters(), grads[len(f_params) :], new.opt_a, prev.lr_adapter)
    return new, loss.item()


@dataclass
class CycleResult:
    task: int
    dates: list[int]
    scores: list[np.ndarray]
    labels: list[np.ndarray]
    loss: float
    ic: float | None  # mean daily IC over the test window

    def daily(self) -> list[tuple[int, np.ndarray, np.ndarray]]:
        return list(zip(self.dates, self.scores, self.labels))


def _mean_ic(scores: Sequence[np.ndarray], labels: Sequence[np.ndarray]) -> float | None:
    ics = [pearson(s, y) for s, y in zip(scores, labels)]
    ics = [v for v in ics if v is not None]
    return float(np.mean(ics)) if ics else None


def run_cycle(
    state: ModelState, task: Task, extra: Sequence[DayBatch] = (), on_adapted: Callable | None = None
) -> tuple[ModelState, CycleResult]:
    """Adapt, predict the test window without seeing its labels, then learn it."""
    with label_horizon(task.test_start):
        adapted = adapt_step(state, list(task.train) + list(extra))
        if on_adapted is not None:
            on_adapted(adapted)
        scores = predict_task(adapted, task.test)
    new_state, loss = online_step(state, adapted, task.test)
    labels = [b.labels for b in task.test]
    return new_state, CycleResult(task.index, task.test_dates, scores, labels, loss, _mean_ic(scores, labels))


def run_tasks(
    state: ModelState,
    tasks: Sequence[Task],
    select: Callable[[Task], Sequence[DayBatch]] | None = None,
) -> tuple[ModelState, list[CycleResult]]:
    """Sequential adaptation over ``tasks``; ``select`` may add historical data."""
    results = []
    for task in tasks:
        extra = select(task) if select is not None else ()
        state, res = run_cycle(state, task, extra)
        results.append(res)
    return state, results


def mean_daily_ic(results: Sequence[CycleResult]) -> float:
    ics = []
    for r in results:
        ics += [v for v in (pearson(s, y) for s, y in zip(r.scores, r.labels)) if v is not None]
    return float(np.mean(ics)) if ics else -math.inf


class EarlyStopping:
    """Keep the best-scoring payload; signal stop after ``patience`` misses in a row."""

    def __init__(self, patience: int = 5):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best_score = -math.inf
        self.best = None
        self.best_epoch = -1
        self.misses = 0

    def update(self, epoch: int, score: float, payload) -> bool:
        if score > self.best_score:
            self.best_score, self.best, self.best_epoch = score, payload, epoch
            self.misses = 0
        else:
            self.misses += 1
        return self.misses >= self.patience


def train_forecaster(
    state: ModelState,
    train_tasks: Sequence[Task],
    val_tasks: Sequence[Task],
    patience: int = 5,
    max_epochs: int = 50,
    validate: Callable[[ModelState], float] | None = None,
) -> tuple[ModelState, list[dict]]:
    """Epochs of sequential adaptation over the training tasks.

    After each epoch the state is snapshotted, scored on the validation tasks
    with the same protocol (mean daily IC), and restored.  Returns the
    best-scoring snapshot and a log with one row per epoch and task.
    """
    if len(train_tasks) < 1 or len(val_tasks) < 1:
        raise ValueError("need at least one training and one validation task")
    stopper = EarlyStopping(patience)
    rows: list[dict] = []
    for epoch in range(1, max_epochs + 1):
        state, results = run_tasks(state, train_tasks)
        rows += [dict(epoch=epoch, task=r.task, phase="train", loss=r.loss, ic=r.ic) for r in results]
        snapshot = state.copy()
        if validate is not None:
            score = validate(state.copy())
            val_rows = []
        else:
            _, val_results = run_tasks(state.copy(), val_tasks)
            score = mean_daily_ic(val_results)
            val_rows = [dict(epoch=epoch, task=r.task, phase="val", loss=r.loss, ic=r.ic) for r in val_results]
        rows += val_rows
        state = snapshot
        log.debug("forecaster epoch %d: validation IC %.4f", epoch, score)
        if stopper.update(epoch, score, snapshot.copy()):
            break
    return stopper.best if stopper.best is not None else state, rows
