"""``driftmeta`` command line: generate | run | ablate.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema

from .checkpoint import (
    CheckpointError,
    inference_arrays,
    load_arrays,
    restore_inference,
    restore_state,
    save_arrays,
    state_arrays,
)
from .io import write_bytes, write_json, write_rows
from .runner import METHODS, ConfigError, ExperimentConfig, StageError, initial_state, load_data, run_ablation, run_experiment
from .stream import subseed, write_csv, write_regime_log
from .taskinfer import EmbeddingParams, InferenceNet

log = logging.getLogger("driftmeta")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

STAGE1_FILE = "stage1.mda"
STAGE2_FILE = "stage2.mda"


def report_schema() -> dict:
    return json.loads(resources.files("driftmeta").joinpath("schemas/report.schema.json").read_text())


def read_config(path, method: str | None = None, allow_scenarios: bool = False) -> tuple[ExperimentConfig, dict | None]:
    """Parse a JSON config; ``scenarios`` (name -> scenario) is only valid for ablate."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")
    scenarios = None
    if "scenarios" in raw:
        if not allow_scenarios:
            raise ConfigError("/scenarios", "only the ablate command accepts several scenarios")
        scenarios = raw.pop("scenarios")
        if not isinstance(scenarios, dict) or not scenarios:
            raise ConfigError("/scenarios", "must be a non-empty object of name -> scenario")
        if "scenario" in raw or "data" in raw:
            raise ConfigError("/scenarios", "give either scenarios or scenario/data, not both")
        first = next(iter(scenarios))
        raw["scenario"] = scenarios[first]
    if method is not None:
        raw["method"] = method
    cfg = ExperimentConfig.from_dict(raw)
    if scenarios is not None:
        for name, sc in scenarios.items():
            try:
                cfg.replace(scenario=sc)
            except ConfigError as exc:
                raise ConfigError(f"/scenarios/{name}{exc.pointer.removeprefix('/scenario')}", str(exc).split(": ", 1)[-1]) from None
    return cfg, scenarios


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg, _ = read_config(args.config)
    if cfg.scenario is None:
        raise ConfigError("/scenario", "generate needs a synthetic scenario, not a data path")
    stream, regimes = load_data(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(stream, out / "stream.csv")
    write_regime_log(regimes, out / "regimes.csv", [b.date for b in stream])
    log.info("wrote %d dates x %d symbols to %s", len(stream), stream[0].n, out)
    return EXIT_OK


def _write_stage1(out: Path, cfg: ExperimentConfig, payload) -> None:
    state, train_log = payload
    arrays = state_arrays(state)
    arrays["meta/epochs"] = [[float(max((r["epoch"] for r in train_log), default=0))]]
    save_arrays(out / STAGE1_FILE, cfg.hash(), arrays)
    write_rows(out / "train_log.csv", ["epoch", "task", "phase", "loss", "ic"], [[r[k] for k in ("epoch", "task", "phase", "loss", "ic")] for r in train_log])


def _write_stage2(out: Path, cfg: ExperimentConfig, payload) -> None:
    (params, net), inference_log = payload
    arrays = inference_arrays(params, net)
    arrays["meta/epochs"] = [[float(max((r["epoch"] for r in inference_log), default=0))]]
    save_arrays(out / STAGE2_FILE, cfg.hash(), arrays)
    write_rows(out / "inference_log.csv", ["epoch", "triplet_loss", "val_ic"], [[r["epoch"], r["triplet_loss"], r["val_ic"]] for r in inference_log])


def cmd_run(args) -> int:
    cfg, _ = read_config(args.config, method=args.method)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg)
    d = data[0][0].d

    stage1 = stage2 = None
    epochs1 = epochs2 = None
    if args.resume:
        src = Path(args.resume)
        if (src / STAGE1_FILE).exists():
            arrays = load_arrays(src / STAGE1_FILE, cfg.hash(), force=args.force)
            stage1 = restore_state(initial_state(cfg, d), arrays)
            epochs1 = int(arrays["meta/epochs"][0, 0])
            log.info("resumed stage 1 from %s", src / STAGE1_FILE)
        if stage1 is not None and cfg.method == "meta-da" and (src / STAGE2_FILE).exists():
            arrays = load_arrays(src / STAGE2_FILE, cfg.hash(), force=args.force)
            template = (EmbeddingParams.init(cfg.q, cfg.p, subseed(cfg.seed, "inference-init")), InferenceNet(cfg.q))
            stage2 = restore_inference(*template, arrays)
            epochs2 = int(arrays["meta/epochs"][0, 0])
            log.info("resumed stage 2 from %s", src / STAGE2_FILE)

    def on_stage(name, payload):
        if name == "train-forecaster":
            _write_stage1(out, cfg, payload)
        elif name == "train-inference":
            _write_stage2(out, cfg, payload)

    result = run_experiment(
        cfg, data=data, stage1=stage1, stage2=stage2, stage1_epochs=epochs1, stage2_epochs=epochs2, on_stage=on_stage
    )
    report = result.report.to_dict()
    jsonschema.validate(report, report_schema())
    write_json(out / "report.json", report)
    write_rows(out / "daily.csv", ["date", "ic", "ric", "topk_return"], [[r["date"], r["ic"], r["ric"], r["topk_return"]] for r in result.daily])
    write_rows(out / "timing.csv", ["task", "seconds", "rows"], [[t["task"], t["seconds"], t["rows"]] for t in result.timings])
    if result.selections:
        keys = ["task", "nearest", "distance", "threshold", "accepted"]
        write_rows(out / "selections.csv", keys, [[s[k] for k in keys] for s in result.selections])
    if stage1 is not None and out.resolve() != Path(args.resume).resolve():
        _copy(Path(args.resume), out, (STAGE1_FILE, "train_log.csv"))
    if stage2 is not None and out.resolve() != Path(args.resume).resolve():
        _copy(Path(args.resume), out, (STAGE2_FILE, "inference_log.csv"))
    log.info("%s seed %d: test IC %.4f", cfg.method, cfg.seed, result.report.ic)
    print(json.dumps({"method": cfg.method, "ic": result.report.ic, "icir": result.report.icir, "out": str(out)}))
    return EXIT_OK


def _copy(src: Path, dst: Path, names: Sequence[str]) -> None:
    for name in names:
        if (src / name).exists():
            write_bytes(dst / name, (src / name).read_bytes())


def cmd_ablate(args) -> int:
    cfg, scenarios = read_config(args.config, allow_scenarios=True)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ConfigError("/methods", f"unknown method {m!r}")
    if args.seeds < 1:
        raise ConfigError("/seeds", "must be >= 1")
    if scenarios is None:
        name = cfg.scenario_params()["kind"] if cfg.scenario is not None else Path(cfg.data).stem
        configs = {name: cfg}
    else:
        configs = {name: cfg.replace(scenario=sc) for name, sc in scenarios.items()}
    seeds = [cfg.seed + i for i in range(args.seeds)]
    result = run_ablation(configs, seeds, methods, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "ablation.csv", ["method", "scenario", "median_ic", "mean_ic"], [[r[k] for k in ("method", "scenario", "median_ic", "mean_ic")] for r in result.table_rows()])
    run_keys = ["method", "seed", "ic", "icir", "ric", "ricir", "ear", "earir"]
    scen_of = [name for name in configs for _ in seeds for _ in methods]
    write_rows(out / "runs.csv", ["scenario", *run_keys], [[s, *[getattr(r, k) for k in run_keys]] for s, r in zip(scen_of, result.reports)])
    write_json(out / "ranks.json", result.to_dict())
    print(json.dumps(result.to_dict()["rank_order"]))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftmeta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic stream and its regime log")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="train, adapt and evaluate one method")
    r.add_argument("--config", required=True)
    r.add_argument("--method", choices=METHODS, default=None, help="overrides the config's method")
    r.add_argument("--out", required=True)
    r.add_argument("--resume", metavar="DIR", default=None, help="reuse completed stage checkpoints from DIR")
    r.add_argument("--force", action="store_true", help="accept checkpoints written by another configuration")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="IL / MetaIL / MetaDA over seeds and scenarios")
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--methods", default=",".join(METHODS))
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("DRIFTMETA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
