"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The slow end-to-end criteria (3-8, 10) train full models on the default
desk-scale scenario; run only this file with ``pytest tests/test_acceptance.py``.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from driftmeta.adapters import AdapterParams, adapt_data, adapt_labels, invert_labels
from driftmeta.autodiff import Tensor
from driftmeta.cli import main
from driftmeta.metrics import friedman_ranks, information_ratio, pearson, spearman
from driftmeta.runner import ExperimentConfig, load_data, run_ablation, run_experiment
from driftmeta.stream import segment_tasks
from driftmeta.taskinfer import EmbeddingParams, embed_task, triplet_loss

from gradcases import check_case, check_model_case, composed_cases, primitive_cases
from oracles import (
    adapt_data_oracle,
    adapt_labels_oracle,
    embed_task_oracle,
    friedman_oracle,
    invert_labels_oracle,
    ir_oracle,
    pearson_oracle,
    spearman_oracle,
    triplet_oracle,
)
from verdicts import record

SEEDS = range(5)
# Regimes differ in their feature means as well as their weights; with
# identically distributed features a label-free task embedding cannot tell
# the regimes apart.
SHIFT = 0.5
CYCLE = dict(kind="recurring-cycle", noise=0.5, shift=SHIFT)
WALK = dict(kind="random-walk", noise=0.5, shift=SHIFT)


def _gate(number, title, passed, detail, elapsed=None, budget=None):
    if budget is not None:
        detail += f"; {elapsed:.1f}s (budget {budget:.0f}s)"
        passed = passed and elapsed < budget
    record(number, title, bool(passed), detail)
    assert passed, detail


def _median_ic(result, method, scenario=0):
    return float(result.median_ic[result.methods.index(method), scenario])


# ----------------------------------------------------------------- 1


def test_c01_gradients():
    t0 = time.perf_counter()
    failures = []
    n = 0
    for seed in range(20):
        for name, (fn, leaves) in primitive_cases(np.random.default_rng(seed)).items():
            ok, worst = check_case(fn, leaves)
            n += 1
            if not ok:
                failures.append(f"{name}@{seed} ({worst:.1e})")
        for name, (fn, params) in composed_cases(np.random.default_rng(seed)).items():
            ok, worst = check_model_case(fn, params)
            n += 1
            if not ok:
                failures.append(f"{name}@{seed} ({worst:.1e})")
    elapsed = time.perf_counter() - t0
    detail = f"{n - len(failures)}/{n} finite-difference checks within 1e-5" + (f", failing {failures[:5]}" if failures else "")
    _gate(1, "gradient correctness", not failures, detail, elapsed, 10)


# ----------------------------------------------------------------- 2


def _random_adapters(rng, d, N):
    return AdapterParams(
        W=[Tensor(0.5 * rng.normal(size=(d, d))) for _ in range(N)],
        b=[Tensor(0.5 * rng.normal(size=(1, d))) for _ in range(N)],
        proto_data=Tensor(rng.normal(size=(N, d))),
        h=Tensor(rng.uniform(0.5, 2.0, size=(1, N))),
        z=Tensor(0.5 * rng.normal(size=(1, N))),
        proto_label=Tensor(rng.normal(size=(N, d))),
        omega=float(rng.uniform(0.5, 2.0)),
    )


def test_c02_formula_oracles():
    t0 = time.perf_counter()
    worst = dict.fromkeys(["adapt_data", "adapt_labels", "invert_labels", "embed_task", "triplet_loss"], 0.0)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n, d, N = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        X, G = rng.normal(size=(n, d)), rng.normal(size=(n, 1))
        ap = _random_adapters(rng, d, N)
        W, b = [t.value for t in ap.W], [t.value for t in ap.b]
        h, z = ap.h.value[0], ap.z.value[0]
        errs = {
            "adapt_data": adapt_data(X, ap).value - adapt_data_oracle(X, W, b, ap.proto_data.value, ap.omega),
            "adapt_labels": adapt_labels(G, X, ap).value - adapt_labels_oracle(G, X, h, z, ap.proto_label.value, ap.omega),
            "invert_labels": invert_labels(G, X, ap).value - invert_labels_oracle(G, X, h, z, ap.proto_label.value, ap.omega),
        }
        q, p = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        ep = EmbeddingParams.init(q, p, rng)
        ep.eps.value[:] = rng.normal(size=(1, q))
        S = rng.normal(size=(int(rng.integers(1, 7)), q))
        errs["embed_task"] = embed_task(S, ep).value - embed_task_oracle(S, ep.V1.value, ep.eps.value, ep.V2.value, ep.v3.value)
        Ep, Et, En = (rng.normal(size=(1, q)) for _ in range(3))
        gamma = float(rng.uniform(0, 2))
        errs["triplet_loss"] = np.array([triplet_loss(Ep, Et, En, gamma).item() - triplet_oracle(Ep, Et, En, gamma)])
        for k, e in errs.items():
            worst[k] = max(worst[k], float(np.max(np.abs(e))))
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    _gate(2, "formula oracles (max abs error over 100 instances)", all(v <= 1e-12 for v in worst.values()), detail, elapsed, 5)


# ----------------------------------------------------------------- 3


@pytest.mark.slow
def test_c03_degradation_to_baseline():
    t0 = time.perf_counter()
    base = ExperimentConfig(seed=0, scenario={})
    data = load_data(base)
    il = run_experiment(base.replace(method="il"), data=data)
    # MetaDA without task inference and with adapters frozen at identity
    frozen = run_experiment(base.replace(method="meta-il", lr_adapter=0.0), data=data)
    same_dates = [a[0] for a in il.predictions] == [b[0] for b in frozen.predictions]
    gap = max(float(np.max(np.abs(a[1] - b[1]))) for a, b in zip(il.predictions, frozen.predictions))
    elapsed = time.perf_counter() - t0
    _gate(3, "degradation to IL", same_dates and gap <= 1e-10, f"max |difference| {gap:.1e} over {len(il.predictions)} dates", elapsed, 60)


# ----------------------------------------------------------------- 4


@pytest.mark.slow
def test_c04_noiseless_learnability():
    t0 = time.perf_counter()
    cfg = ExperimentConfig(seed=0, scenario=dict(n_regimes=1, noise=0.0), method="il")
    out = run_experiment(cfg)
    by_epoch = {}
    for row in out.train_log:
        if row["phase"] == "val":
            by_epoch.setdefault(row["epoch"], []).append(row["ic"])
    best = max(float(np.mean(v)) for v in by_epoch.values())
    elapsed = time.perf_counter() - t0
    _gate(4, "noiseless learnability", best > 0.95, f"best validation IC {best:.4f} (> 0.95)", elapsed, 120)


# ----------------------------------------------------------------- 5


@pytest.mark.slow
def test_c05_ablation_direction():
    t0 = time.perf_counter()
    res = run_ablation({"cycle": ExperimentConfig(seed=0, scenario=CYCLE)}, SEEDS)
    il, mil, mda = (_median_ic(res, m) for m in ("il", "meta-il", "meta-da"))
    elapsed = time.perf_counter() - t0
    ok = mda >= mil >= il and mda - mil >= 0.02
    detail = f"median IC il {il:.4f}, meta-il {mil:.4f}, meta-da {mda:.4f}; meta-da - meta-il {mda - mil:+.4f} (need >= +0.02)"
    _gate(5, "IL <= MetaIL <= MetaDA with +0.02 gap", ok, detail, elapsed, 900)


# ----------------------------------------------------------------- 6


@pytest.mark.slow
def test_c06_gate_on_random_walk():
    t0 = time.perf_counter()
    res = run_ablation({"walk": ExperimentConfig(seed=0, scenario=WALK)}, SEEDS, methods=("meta-il", "meta-da"))
    mil, mda = _median_ic(res, "meta-il"), _median_ic(res, "meta-da")
    elapsed = time.perf_counter() - t0
    detail = f"median IC meta-il {mil:.4f}, meta-da {mda:.4f}; |difference| {abs(mda - mil):.4f} (<= 0.01)"
    _gate(6, "no harmful injection on a random walk", abs(mda - mil) <= 0.01, detail, elapsed, 900)


# ----------------------------------------------------------------- 7


@pytest.mark.slow
def test_c07_selection_accuracy():
    t0 = time.perf_counter()
    accs = []
    for seed in SEEDS:
        cfg = ExperimentConfig(seed=seed, scenario=dict(CYCLE, noise=0.0), method="meta-da")
        stream, regimes = load_data(cfg)
        tasks = {t.index: t for t in segment_tasks(stream, cfg.t_ada)}
        out = run_experiment(cfg, data=(stream, regimes))
        hits = [
            regimes[tasks[row["selected"]].train_dates[0]] == regimes[tasks[row["task"]].test_dates[0]]
            for row in out.report.per_task
            if row["accepted"]
        ]
        accs.append(float(np.mean(hits)) if hits else 0.0)
    med = float(np.median(accs))
    elapsed = time.perf_counter() - t0
    detail = f"median accuracy {med:.2f} (>= 0.70), per seed {[round(a, 2) for a in accs]}"
    _gate(7, "selection accuracy", med >= 0.70, detail, elapsed, 600)


# ----------------------------------------------------------------- 8


@pytest.mark.slow
def test_c08_adaptation_cost():
    base = ExperimentConfig(seed=0, scenario={})
    data = load_data(base)
    mil = run_experiment(base.replace(method="meta-il"), data=data)
    mda = run_experiment(base.replace(method="meta-da"), data=data, stage1=mil.stage1, stage1_epochs=mil.report.stage1_epochs)
    t_mil = float(np.median([t["seconds"] for t in mil.timings]))
    t_mda = float(np.median([t["seconds"] for t in mda.timings]))
    ratio = t_mda / t_mil
    detail = f"median per-task adaptation {t_mda * 1e3:.2f} ms vs {t_mil * 1e3:.2f} ms, ratio {ratio:.2f} (<= 3)"
    _gate(8, "MetaDA / MetaIL adaptation wall-clock", ratio <= 3.0, detail)


# ----------------------------------------------------------------- 9


def test_c09_metric_oracles():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 30))
        a = rng.normal(size=n)
        b = np.round(rng.normal(size=n), 1)
        worst = max(worst, abs(pearson(a, b) - pearson_oracle(list(a), list(b))))
        worst = max(worst, abs(spearman(a, b) - spearman_oracle(list(a), list(b))))
        ics = list(rng.uniform(-0.2, 0.3, size=int(rng.integers(2, 20))))
        worst = max(worst, abs(information_ratio(ics) - ir_oracle(ics)))
        table = np.round(rng.normal(size=(int(rng.integers(2, 5)), int(rng.integers(1, 6)))), 1)
        R, chi2 = friedman_oracle(table.tolist())
        fr = friedman_ranks(table)
        worst = max(worst, float(np.max(np.abs(fr.mean_ranks - R))), abs(fr.statistic - chi2))
    x = np.random.default_rng(99).normal(size=20)
    edges = [pearson(x, 2 * x + 1), pearson(x, -x), spearman(x, np.exp(x)), spearman(x, -x)]
    ok = worst <= 1e-12 and edges == [1.0, -1.0, 1.0, -1.0]
    _gate(9, "metric oracles", ok, f"max abs error {worst:.1e} over 50 tables; edge cases {edges}")


# ---------------------------------------------------------------- 10


NONDETERMINISTIC = {"timing.csv"}  # wall-clock measurements


def _outputs(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.suffix in (".csv", ".json") and p.name not in NONDETERMINISTIC
    }


@pytest.mark.slow
def test_c10_determinism(tmp_path):
    cfg = {"seed": 7, "scenario": dict(CYCLE, dates=300, symbols=30), "max_epochs": 5}
    abl = {k: v for k, v in cfg.items() if k != "scenario"}
    abl["scenarios"] = {"cycle": cfg["scenario"], "walk": dict(WALK, dates=300, symbols=30)}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    (tmp_path / "a.json").write_text(json.dumps(abl))
    for rep in ("first", "second"):
        out = tmp_path / rep
        assert main(["generate", "--config", str(tmp_path / "c.json"), "--out", str(out / "gen")]) == 0
        for m in ("il", "meta-il", "meta-da"):
            assert main(["run", "--config", str(tmp_path / "c.json"), "--method", m, "--out", str(out / m)]) == 0
        assert main(["ablate", "--config", str(tmp_path / "a.json"), "--seeds", "2", "--out", str(out / "ablate")]) == 0
    a, b = _outputs(tmp_path / "first"), _outputs(tmp_path / "second")
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = a.keys() == b.keys() and not differing and len(a) > 10
    detail = f"{len(a) - len(differing)}/{len(a)} CSV/JSON files byte-identical (timing.csv excluded)"
    if differing:
        detail += f", differing {differing}"
    _gate(10, "determinism", ok, detail)
