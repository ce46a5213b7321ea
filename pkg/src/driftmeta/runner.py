"""End-to-end experiments: three-stage procedure and the IL / MetaIL / MetaDA ablation."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Sequence

import numpy as np

from .adapters import init_adapters
from .autodiff import AdamState
from .meta import CycleResult, ModelState, run_cycle, train_forecaster
from .metrics import friedman_ranks, ic_series, topk_portfolio
from .models import make_forecaster
from .stream import DayBatch, Task, generate_stream, load_csv, make_scenario, segment_tasks, subseed
from .taskinfer import EmbeddingParams, InferenceNet, TaskSelector, train_inference

__all__ = [
    "ConfigError",
    "StageError",
    "ExperimentConfig",
    "RunReport",
    "RunArtifacts",
    "load_data",
    "split_tasks",
    "run_experiment",
    "run_ablation",
    "METHODS",
]

log = logging.getLogger(__name__)

METHODS = ("il", "meta-il", "meta-da")


class ConfigError(ValueError):
    """Invalid configuration; ``pointer`` is a JSON pointer to the offending field."""

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


SCENARIO_DEFAULTS: dict[str, Any] = {
    "kind": "recurring-cycle",
    "dates": 750,
    "symbols": 100,
    "d": 12,
    "n_regimes": 2,
    "block": 15,
    "noise": 0.5,
    "shift": 0.0,
    "step": 0.3,
    "bias": 0.0,
}


@dataclass
class ExperimentConfig:
    seed: int
    scenario: dict | None = None
    data: str | None = None
    method: str = "meta-da"
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    t_ada: int = 15
    lookback: int = 8
    kappa: float = 80.0
    gamma: float = 1.0
    n_proj: int = 8
    omega: float = 1.0
    q: int = 32
    p: int = 16
    topk: int = 30
    lr: float = 1e-3
    lr_adapter: float = 1e-2
    lr_task: float = 1e-3
    lr_inner: float | None = None
    patience: int = 5
    max_epochs: int = 50
    arch: str = "mlp"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("", "config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(f"/{key}", "unknown field")
        if raw.get("seed") is None:
            raise ConfigError("/seed", "seed required")
        kw = dict(raw)
        if "split" in kw:
            kw["split"] = tuple(kw["split"]) if isinstance(kw["split"], list) else kw["split"]
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def need(cond, ptr, msg):
            if not cond:
                raise ConfigError(ptr, msg)

        need(isinstance(self.seed, int) and not isinstance(self.seed, bool) and self.seed >= 0, "/seed", "must be a non-negative integer")
        need(self.method in METHODS, "/method", f"must be one of {list(METHODS)}")
        need((self.scenario is None) != (self.data is None), "/scenario", "give exactly one of scenario or data")
        if self.scenario is not None:
            need(isinstance(self.scenario, dict), "/scenario", "must be an object")
            for key, val in self.scenario.items():
                need(key in SCENARIO_DEFAULTS, f"/scenario/{key}", "unknown field")
                default = SCENARIO_DEFAULTS[key]
                if isinstance(default, str):
                    need(isinstance(val, str), f"/scenario/{key}", "must be a string")
                else:
                    need(isinstance(val, (int, float)) and not isinstance(val, bool), f"/scenario/{key}", "must be a number")
            sc = self.scenario_params()
            need(sc["kind"] in ("recurring-cycle", "random-walk", "mixed"), "/scenario/kind", "unknown scenario kind")
            for key in ("dates", "symbols", "d", "n_regimes", "block"):
                need(isinstance(sc[key], int) and sc[key] >= 1, f"/scenario/{key}", "must be a positive integer")
            for key in ("noise", "shift", "step"):
                need(sc[key] >= 0, f"/scenario/{key}", "must be non-negative")
        need(isinstance(self.split, tuple) and len(self.split) == 3 and all(x > 0 for x in self.split), "/split", "must be three positive fractions")
        need(abs(sum(self.split) - 1.0) < 1e-9, "/split", "fractions must sum to 1")
        for key in ("t_ada", "lookback", "n_proj", "q", "p", "topk", "patience", "max_epochs"):
            val = getattr(self, key)
            need(isinstance(val, int) and not isinstance(val, bool) and val >= 1, f"/{key}", "must be a positive integer")
        need(0 <= self.kappa <= 100, "/kappa", "must lie in [0, 100]")
        need(self.gamma >= 0, "/gamma", "must be non-negative")
        need(self.omega > 0, "/omega", "must be positive")
        for key in ("lr", "lr_adapter", "lr_task"):
            need(getattr(self, key) >= 0, f"/{key}", "must be non-negative")
        need(self.lr_inner is None or self.lr_inner >= 0, "/lr_inner", "must be non-negative")
        need(self.arch in ("mlp", "recurrent"), "/arch", "must be mlp or recurrent")

    def scenario_params(self) -> dict:
        return {**SCENARIO_DEFAULTS, **(self.scenario or {})}

    def to_dict(self) -> dict:
        out = asdict(self)
        out["split"] = list(self.split)
        return out

    def hash(self, exclude: Sequence[str] = ()) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def replace(self, **kw) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        for k, v in kw.items():
            setattr(new, k, v)
        new.validate()
        return new


@dataclass
class RunReport:
    method: str
    seed: int
    config_hash: str
    ic: float
    icir: float | None
    ric: float | None
    ricir: float | None
    ear: float
    earir: float | None
    n_valid_days: int
    n_undefined_days: int
    per_task: list[dict]
    stage1_epochs: int
    stage2_epochs: int | None
    portfolio: str = "topk-simplified"
    excess_baseline: str = "equal-weight universe mean"

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class RunArtifacts:
    report: RunReport
    daily: list[dict]  # date, ic, ric, topk_return
    predictions: list[tuple[int, np.ndarray]]
    timings: list[dict]  # task, seconds
    train_log: list[dict]
    inference_log: list[dict]
    stage1: ModelState | None = None
    stage2: tuple[EmbeddingParams, InferenceNet] | None = None
    selections: list[dict] = field(default_factory=list)


def load_data(config: ExperimentConfig) -> tuple[list[DayBatch], np.ndarray | None]:
    """Stream and (for synthetic data) the per-date regime log."""
    if config.data is not None:
        return load_csv(config.data), None
    sc = config.scenario_params()
    scenario = make_scenario(
        sc["kind"],
        sc["dates"],
        sc["d"],
        config.seed,
        n_regimes=sc["n_regimes"],
        block=sc["block"],
        noise=sc["noise"],
        shift=sc["shift"],
        step=sc["step"],
        bias=sc["bias"],
    )
    return generate_stream(scenario, sc["symbols"])


def split_tasks(tasks: Sequence[Task], split: Sequence[float]) -> tuple[list[Task], list[Task], list[Task]]:
    n = len(tasks)
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    tr, va, te = list(tasks[:n_train]), list(tasks[n_train : n_train + n_val]), list(tasks[n_train + n_val :])
    for name, part in (("train", tr), ("validation", va), ("test", te)):
        if len(part) < 2:
            raise ConfigError("/split", f"{name} split has {len(part)} tasks; at least 2 are required")
    return tr, va, te


def initial_state(config: ExperimentConfig, d: int) -> ModelState:
    """Fresh parameters; forecaster init does not depend on the method."""
    fc = make_forecaster(config.arch, d, q=config.q, rng=subseed(config.seed, "init"))
    adapters = None
    if config.method != "il":
        adapters = init_adapters(d, config.n_proj, config.omega, rng=subseed(config.seed, "adapters"))
    return ModelState(
        fc,
        adapters,
        AdamState(lr=config.lr),
        AdamState(lr=config.lr_adapter),
        lr=config.lr,
        lr_adapter=config.lr_adapter,
        lr_inner=config.lr_inner,
    )


def _stage(name: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (StageError, ConfigError):
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(name, exc) from exc


def run_experiment(
    config: ExperimentConfig,
    data: tuple[list[DayBatch], np.ndarray | None] | None = None,
    stage1: ModelState | None = None,
    stage2: tuple[EmbeddingParams, InferenceNet] | None = None,
    *,
    stage1_epochs: int | None = None,
    stage2_epochs: int | None = None,
    on_stage: Callable[[str, Any], None] | None = None,
) -> RunArtifacts:
    """Train the forecaster, train task inference (meta-da only), then adapt over the test tasks.

    ``stage1`` / ``stage2`` short-circuit the corresponding training stage
    (used for resuming and for sharing stage 1 between ablation arms); the
    matching ``*_epochs`` are then reported as given.  ``on_stage(name,
    payload)`` is called after each training stage completes.
    """
    config.validate()
    stream, regimes = data if data is not None else _stage("data", load_data, config)
    tasks = _stage("data", segment_tasks, stream, config.t_ada)
    train, val, test = split_tasks([t for t in tasks if t.test], config.split)
    d = stream[0].d

    train_log: list[dict] = []
    if stage1 is None:
        state0 = initial_state(config, d)
        state0, train_log = _stage(
            "train-forecaster",
            train_forecaster,
            state0,
            train,
            val,
            patience=config.patience,
            max_epochs=config.max_epochs,
        )
        stage1_epochs = max((r["epoch"] for r in train_log), default=0)
        if on_stage is not None:
            on_stage("train-forecaster", (state0, train_log))
    else:
        state0 = stage1.copy()

    inference_log: list[dict] = []
    selector = None
    if config.method == "meta-da":
        if stage2 is None:
            fit = _stage(
                "train-inference",
                train_inference,
                state0,
                train,
                val,
                q=config.q,
                p=config.p,
                lookback=config.lookback,
                kappa=config.kappa,
                gamma=config.gamma,
                lr=config.lr_task,
                patience=config.patience,
                max_epochs=config.max_epochs,
                rng=subseed(config.seed, "inference-init"),
                shuffle_rng=subseed(config.seed, "shuffle"),
            )
            stage2 = (fit.params, fit.net)
            inference_log = fit.log
            stage2_epochs = max((r["epoch"] for r in inference_log), default=0)
            if on_stage is not None:
                on_stage("train-inference", (stage2, inference_log))
        selector = TaskSelector(state0, stage2[0], stage2[1], {t.index: t for t in tasks}, config.lookback, config.kappa)
        for t in train:
            selector.ingest(t)

    def adapt_phase():
        state = state0.copy()
        results: list[CycleResult] = []
        timings: list[dict] = []
        for phase, group in (("warmup", val), ("test", test)):
            for task in group:
                t0 = time.perf_counter()
                extra = selector(task) if selector is not None else []
                box: dict[str, float] = {}
                state, res = run_cycle(state, task, extra, on_adapted=lambda _: box.setdefault("t", time.perf_counter()))
                if phase == "test":
                    results.append(res)
                    timings.append(dict(task=task.index, seconds=box["t"] - t0, rows=sum(b.n for b in list(task.train) + list(extra))))
        return state, results, timings

    final_state, results, timings = _stage("adapt", adapt_phase)

    daily_preds = [triple for r in results for triple in r.daily()]
    summary = ic_series(daily_preds)
    port = topk_portfolio(daily_preds, min(config.topk, min(s.size for _, s, _ in daily_preds)))
    selections = []
    sel_by_task = {}
    if selector is not None:
        for idx, sel in selector.log:
            sel_by_task[idx] = sel
            selections.append(dict(task=idx, nearest=sel.index, distance=sel.distance, threshold=sel.threshold, accepted=sel.accepted))
    per_task = []
    for r in results:
        row = dict(task=r.task, ic=r.ic, loss=r.loss)
        if r.task in sel_by_task:
            s = sel_by_task[r.task]
            row.update(selected=s.index if s.accepted else None, nearest=s.index, accepted=s.accepted)
        per_task.append(row)
    report = RunReport(
        method=config.method,
        seed=config.seed,
        config_hash=config.hash(),
        ic=summary.ic,
        icir=summary.icir,
        ric=summary.ric,
        ricir=summary.ricir,
        ear=port.ear,
        earir=port.earir,
        n_valid_days=summary.n_valid,
        n_undefined_days=summary.n_undefined,
        per_task=per_task,
        stage1_epochs=stage1_epochs,
        stage2_epochs=stage2_epochs if config.method == "meta-da" else None,
    )
    daily = [
        dict(date=day.date, ic=day.ic, ric=day.ric, topk_return=ret)
        for day, ret in zip(summary.days, port.returns.tolist())
    ]
    return RunArtifacts(
        report=report,
        daily=daily,
        predictions=[(date, scores) for date, scores, _ in daily_preds],
        timings=timings,
        train_log=train_log,
        inference_log=inference_log,
        stage1=state0,
        stage2=stage2,
        selections=selections,
    )


@dataclass
class AblationResult:
    methods: list[str]
    scenarios: list[str]
    reports: list[RunReport]
    median_ic: np.ndarray  # methods x scenarios
    mean_ic: np.ndarray
    mean_ranks: list[float]
    friedman_statistic: float

    def table_rows(self) -> list[dict]:
        rows = []
        for i, m in enumerate(self.methods):
            for j, s in enumerate(self.scenarios):
                rows.append(dict(method=m, scenario=s, median_ic=float(self.median_ic[i, j]), mean_ic=float(self.mean_ic[i, j])))
        return rows

    def to_dict(self) -> dict:
        return dict(
            methods=self.methods,
            scenarios=self.scenarios,
            median_ic=self.median_ic.tolist(),
            mean_ic=self.mean_ic.tolist(),
            mean_ranks=self.mean_ranks,
            friedman_statistic=self.friedman_statistic,
            rank_order=[self.methods[i] for i in np.argsort(self.mean_ranks, kind="stable")],
            runs=len(self.reports),
        )


def _ablation_unit(config: ExperimentConfig, methods: Sequence[str]) -> list[RunReport]:
    """All methods on one scenario and seed; MetaIL and MetaDA share stage 1."""
    data = load_data(config)
    shared: tuple[ModelState, int] | None = None
    reports = []
    for m in methods:
        cfg = config.replace(method=m)
        if m != "il" and shared is not None:
            out = run_experiment(cfg, data=data, stage1=shared[0], stage1_epochs=shared[1])
        else:
            out = run_experiment(cfg, data=data)
            if m != "il":
                shared = (out.stage1, out.report.stage1_epochs)
        reports.append(out.report)
    return reports


def run_ablation(
    configs: dict[str, ExperimentConfig] | Sequence[ExperimentConfig],
    seeds: Sequence[int],
    methods: Sequence[str] = METHODS,
    jobs: int = 1,
) -> AblationResult:
    """Every method x scenario x seed; medians per cell and Friedman ranks of the medians.

    Units (scenario, seed) run in up to ``jobs`` worker processes; results
    do not depend on ``jobs``.
    """
    if not isinstance(configs, dict):
        configs = {f"scenario{i}": c for i, c in enumerate(configs)}
    if not methods:
        raise ConfigError("/methods", "at least one method is required")
    for m in methods:
        if m not in METHODS:
            raise ConfigError("/methods", f"unknown method {m!r}")
    if not seeds:
        raise ConfigError("/seeds", "at least one seed is required")
    names = list(configs)
    units = [(name, configs[name].replace(seed=int(seed))) for name in names for seed in seeds]
    if jobs > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ablation_unit, [c for _, c in units], [tuple(methods)] * len(units)))
    else:
        results = [_ablation_unit(c, methods) for _, c in units]
    reports: list[RunReport] = []
    ics: dict[tuple[str, str], list[float]] = {}
    for (name, _), unit in zip(units, results):
        for rep in unit:
            reports.append(rep)
            ics.setdefault((rep.method, name), []).append(rep.ic)
    med = np.array([[np.median(ics[m, n]) for n in names] for m in methods])
    mean = np.array([[np.mean(ics[m, n]) for n in names] for m in methods])
    fr = friedman_ranks(med, methods)
    return AblationResult(list(methods), names, reports, med, mean, fr.mean_ranks.tolist(), fr.statistic)
