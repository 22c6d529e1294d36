"""Batch command-line interface.

    mlsae fit|predict|accuracy|simulate --config run.json [--seed N] [--threads N] [--out DIR]

The config is a JSON object; see README.md for the schema. The flags
override the top-level ``seed``, ``threads`` and ``out`` fields. Every file
written embeds the resolved config and the master seed. ``threads`` and
``out`` are left out of that record because they do not affect results.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import accuracy, gbt, lmm, simulation
from .errors import ConfigError, SaeError
from .frame import LongFrame, load_frame
from .predictor import KINDS, ModelSetup, PlugInProblem, ThetaSpec, fit_models, gb_features, plug_in_predict
from .rng import child_seed

COMMANDS = ("fit", "predict", "accuracy", "simulate")


# -- config -------------------------------------------------------------------


def load_config(path, overrides: Optional[dict] = None) -> dict:
    """Read a JSON config, resolve relative paths against its directory and apply overrides."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    base = path.parent
    for block, key in (("data", "path"), ("model", "artifact")):
        sub = cfg.get(block)
        if isinstance(sub, dict) and isinstance(sub.get(key), str):
            p = Path(sub[key])
            sub[key] = os.path.normpath(p if p.is_absolute() else (base / p))
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    cfg.setdefault("seed", 0)
    cfg.setdefault("threads", 1)
    cfg.setdefault("out", "out")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError(f"threads must be a positive integer, got {cfg['threads']!r}")
    return cfg


def _record(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in ("threads", "out")}


def _header(cfg: dict) -> str:
    return f"seed: {cfg['seed']}\nconfig: {json.dumps(_record(cfg), sort_keys=True)}"


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _frame(cfg: dict) -> LongFrame:
    data = cfg.get("data")
    if not isinstance(data, dict):
        raise ConfigError("config needs a 'data' block")
    if "path" in data:
        return load_frame(data["path"], data.get("schema"))
    if "synthetic" in data:
        return _synthetic(data["synthetic"], cfg["seed"])
    raise ConfigError("data block needs 'path' or 'synthetic'")


def _synthetic(block: dict, seed: int) -> LongFrame:
    block = dict(block)
    frame = simulation.synthetic_frame(
        n_domains=block.pop("n_domains", 10),
        units_per_domain=block.pop("units_per_domain", 20),
        n_periods=block.pop("n_periods", 3),
        seed=block.pop("seed", seed),
        aux={k: tuple(v) for k, v in block.pop("aux").items()} if "aux" in block else None,
    )
    if block:
        raise ConfigError(f"unknown synthetic frame option(s): {', '.join(sorted(block))}")
    return frame


def _thetas(cfg: dict) -> list:
    raw = cfg.get("thetas")
    if not raw:
        raise ConfigError("config needs a non-empty 'thetas' list")
    return [ThetaSpec.from_dict(t) for t in raw]


def _kinds(model: dict) -> tuple:
    kinds = tuple(model.get("kinds", KINDS))
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise ConfigError(f"model.kinds must be a non-empty subset of {KINDS}, got {list(kinds)}")
    return kinds


def _setup(model: dict) -> ModelSetup:
    def cols(key):
        v = model.get(key)
        return tuple(v) if v is not None else None

    return ModelSetup(
        lmm_columns=cols("lmm_columns"),
        intercept=bool(model.get("intercept", False)),
        gb_columns=cols("gb_columns"),
        gb_period=bool(model.get("gb_period", True)),
        gb_domain_onehot=bool(model.get("gb_domain_onehot", False)),
        gb_params=gbt.GbHyperparams.from_dict(model.get("gb_params", {})),
    )


def _tune(setup: ModelSetup, model: dict, frame: LongFrame, seed: int) -> tuple:
    """Apply the GB hyperparameter search if one is configured; returns (setup, search record)."""
    search = model.get("search")
    if not search:
        return setup, None
    n_folds = int(search.get("n_folds", 5))
    candidates = gbt.random_search(search.get("space", {}), int(search.get("n_candidates", 10)), child_seed(seed, "search"))
    feats, _ = gb_features(frame, setup)
    s = frame.sample_index
    groups = [f"{d}/{u}" for d, u in zip(frame.domain[s], frame.unit[s])]
    folds = gbt.group_folds(groups, n_folds, child_seed(seed, "cv_folds"))
    scores = gbt.cv_scores(feats[s], frame.y[s], folds, candidates, child_seed(seed, "cv"))
    best = candidates[int(np.argmin(scores))]
    record = {"n_folds": n_folds, "candidates": [c.to_dict() for c in candidates], "cv_mse": [float(v) for v in scores], "chosen": best.to_dict()}
    return replace(setup, gb_params=best), record


def _prepare(cfg: dict):
    model = cfg.get("model", {})
    frame = _frame(cfg)
    kinds = _kinds(model)
    setup, search = _tune(_setup(model), model, frame, cfg["seed"]) if "gb" in kinds else (_setup(model), None)
    return frame, kinds, setup, search


# -- commands -----------------------------------------------------------------


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text, encoding="utf-8")
    return path


def cmd_fit(cfg: dict) -> list:
    frame, kinds, setup, search = _prepare(cfg)
    models = fit_models(frame, setup, kinds, cfg["seed"])
    doc = {
        "seed": cfg["seed"],
        "config": _record(cfg),
        "setup": setup.to_dict(),
        "models": {k: m.to_dict() for k, m in models.items()},
        "report": {"n_rows": frame.N_L, "n_sampled": frame.n_L, "n_domains": frame.n_domains, "n_periods": frame.n_periods},
    }
    if search:
        doc["search"] = search
    return [_write(Path(cfg["out"]), "fit.json", _dump_json(doc))]


def _load_models(path: str) -> tuple:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"model artifact not found: {p}")
    doc = json.loads(p.read_text(encoding="utf-8"))
    models = {}
    for kind, d in doc["models"].items():
        models[kind] = lmm.LmmFit.from_dict(d) if kind == "lmm" else gbt.GbModel.from_dict(d)
    s = doc["setup"]
    setup = ModelSetup(
        lmm_columns=tuple(s["lmm_columns"]) if s["lmm_columns"] is not None else None,
        intercept=s["intercept"],
        gb_columns=tuple(s["gb_columns"]) if s["gb_columns"] is not None else None,
        gb_period=s["gb_period"],
        gb_domain_onehot=s["gb_domain_onehot"],
        gb_params=gbt.GbHyperparams.from_dict(s["gb_params"]),
    )
    return models, setup


def cmd_predict(cfg: dict) -> list:
    thetas = _thetas(cfg)
    model = cfg.get("model", {})
    if "artifact" in model:
        frame = _frame(cfg)
        models, setup = _load_models(model["artifact"])
        kinds = _kinds(model) if "kinds" in model else tuple(k for k in KINDS if k in models)
        missing = set(kinds) - set(models)
        if missing:
            raise ConfigError(f"artifact {model['artifact']} lacks model(s): {', '.join(sorted(missing))}")
    else:
        frame, kinds, setup, _ = _prepare(cfg)
        models = fit_models(frame, setup, kinds, cfg["seed"])
    buf = io.StringIO()
    for line in _header(cfg).splitlines():
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["predictor", "statistic", "domain", "period", "p", "theta_hat"])
    for t in thetas:
        for kind in kinds:
            value = plug_in_predict(kind, frame, t, models[kind], setup)
            w.writerow([kind, t.statistic, t.domain, t.period, "" if t.p is None else repr(t.p), repr(value)])
    return [_write(Path(cfg["out"]), "predictions.csv", buf.getvalue())]


def cmd_accuracy(cfg: dict) -> list:
    thetas = _thetas(cfg)
    block = cfg.get("accuracy", {})
    frame, kinds, setup, _ = _prepare(cfg)
    fit = lmm.fit_reml(frame, setup.lmm_columns, setup.intercept)
    problem = PlugInProblem(frame, setup, kinds, thetas)
    report = accuracy.accuracy_report(
        fit,
        problem,
        tuple(block.get("estimators", ("param", "rb", "rbCor"))),
        int(block.get("B", 200)),
        int(block.get("C", 1)),
        tuple(block.get("qape_orders", (0.5, 0.75, 0.99))),
        child_seed(cfg["seed"], "accuracy"),
        float(block.get("q", accuracy.DEFAULT_Q)),
        cfg["threads"],
    )
    report.metadata["config"] = _record(cfg)
    report.metadata["master_seed"] = cfg["seed"]
    out = Path(cfg["out"])
    return [
        _write(out, "accuracy.json", report.to_json()),
        _write(out, "accuracy.csv", report.to_csv(_header(cfg))),
    ]


def _scenarios(block: dict, frame: LongFrame, cfg: dict) -> dict:
    kinds = tuple(block.get("scenarios", simulation.SCENARIOS))
    for k in kinds:
        if k not in simulation.SCENARIO_SCALE:
            raise ConfigError(f"unknown scenario {k!r}; expected one of {simulation.SCENARIOS}")
    columns = tuple(block.get("columns", simulation.DEFAULT_COLUMNS))
    if "params" in block:
        # explicit parameters per mean structure: {"LM": {...}, "NLM": {...}}
        params = block["params"]
        out = {}
        for k in kinds:
            p = params["LM" if k == "LM" else "NLM"]
            out[k] = simulation.ScenarioSpec(k, tuple(p["beta_pop"]), float(p["sigma2_u_pop"]), float(p["sigma2_e_pop"]), columns)
        return out
    source = block.get("calibration", "reference")
    if source == "data":
        population = frame
    elif source == "reference":
        population = simulation.reference_population(frame, child_seed(cfg["seed"], "reference"), columns)
    else:
        raise ConfigError(f"simulation.calibration must be 'data' or 'reference', got {source!r}")
    return simulation.calibrated_scenarios(population, kinds, columns)


def cmd_simulate(cfg: dict) -> list:
    block = cfg.get("simulation")
    if not isinstance(block, dict):
        raise ConfigError("config needs a 'simulation' block")
    thetas = _thetas(cfg)
    frame = _frame(cfg) if "data" in cfg else simulation.synthetic_frame(seed=cfg["seed"])
    specs = _scenarios(block, frame, cfg)
    model = cfg.get("model", {})
    kinds = _kinds(model)
    setup = _setup(model)
    if "lmm_columns" not in model:
        setup = replace(setup, lmm_columns=tuple(block.get("columns", simulation.DEFAULT_COLUMNS)))
    if "gb_columns" not in model:
        setup = replace(setup, gb_columns=tuple(block.get("columns", simulation.DEFAULT_COLUMNS)))
    mc = simulation.McConfig(
        K=int(block.get("K", 200)),
        B=int(block.get("B", 200)),
        C=int(block.get("C", 1)),
        fraction=float(block.get("fraction", 0.2)),
        thetas=tuple(thetas),
        kinds=kinds,
        estimators=tuple(block.get("estimators", ("param", "rb", "rbCor"))),
        qape_orders=tuple(block.get("qape_orders", (0.5, 0.75, 0.99))),
        seed=child_seed(cfg["seed"], "simulate"),
        q=float(block.get("q", accuracy.DEFAULT_Q)),
        threads=cfg["threads"],
    )
    studies = block.get("studies", ["predictors"])
    bad = set(studies) - {"predictors", "estimators"}
    if bad:
        raise ConfigError(f"unknown simulation study: {', '.join(sorted(bad))}")
    predictors, estimators = simulation.MeasureTable(), simulation.MeasureTable()
    for kind, spec in specs.items():
        if "predictors" in studies:
            predictors.extend(simulation.mc_predictors(mc, spec, frame, setup))
        if "estimators" in studies:
            estimators.extend(simulation.mc_accuracy_estimators(mc, spec, frame, setup))
    header = _header(cfg) + "\nscenarios: " + json.dumps({k: s.to_dict() for k, s in specs.items()}, sort_keys=True)
    out = Path(cfg["out"])
    written = []
    if "predictors" in studies:
        written.append(_write(out, "simulation_predictors.csv", predictors.to_csv(header)))
    if "estimators" in studies:
        written.append(_write(out, "simulation_estimators.csv", estimators.to_csv(header)))
    return written


HANDLERS = {"fit": cmd_fit, "predict": cmd_predict, "accuracy": cmd_accuracy, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlsae", description="Plug-in prediction and bootstrap accuracy for domain characteristics.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--threads", type=int, help="worker processes (overrides config)")
    parser.add_argument("--out", help="output directory (overrides config)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "threads": args.threads, "out": args.out})
        for path in HANDLERS[args.command](cfg):
            print(path)
    except (SaeError, FileNotFoundError, ValueError, KeyError, TypeError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"mlsae {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
