"""Command-line front end.

Commands: ``generate``, ``learn``, ``evaluate``, ``bench`` and ``repro``.
Settings are resolved from, lowest priority first: built-in defaults, a named
preset, the section of an INI config file named after the command (keys are
the long flag names), and flags on the command line.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
Failures print a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .data import DataError, Dataset, read_csv, write_csv
from .graph import (
    CycleError,
    Dag,
    LayerDecomposition,
    Ordering,
    atomic_write,
    is_consistent_layering,
    is_consistent_ordering,
    read_dag,
    shd,
    write_dag,
)
from .npvar import NpvarConfig, NumericalError, npvar_layers, population_order
from .oracle import (
    GaussianLinearModel,
    GaussianLinearOracle,
    OracleError,
    PluginVarianceSource,
    chain_mc_cond_var,
    eqvar_linear_order,
    gaussian_linear_cond_var,
    greedy_incedge_order,
)
from .prune import PruneConfig, prune_parents
from .regress import RegressionError, RegressorSpec
from .simulate import (
    MODEL_KINDS,
    NAMED_MODELS,
    attach_mechanisms,
    gen_graph,
    model_manifest,
    named_model,
    simulate_dataset,
)

ENV_OUT = "NPVAR_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_SEED_OFFSET = 1000

REGRESSOR_ALIASES = {
    "kernel": "kernel_smoother", "kernel_smoother": "kernel_smoother",
    "knn": "knn", "additive": "additive_backfit", "additive_backfit": "additive_backfit",
}
PRESETS = {
    "default": {},
    # splitting off and additive fits: the settings used for every benchmark grid
    "benchmark": {"regressor": "additive_backfit", "disable_split": True},
}
REPRO_PRESETS = ("camfail", "misspec", "appendixC_table", "exampleB1")
CAMFAIL_VARIANTS = (
    ("eq5", {"g": "sin"}),
    ("eq5", {"g": "sign-power-1.4"}),
    ("camfail_gdelta", {"g": "sin", "delta": 0.1}),
    ("camfail_quadratic", {"h": "sin"}),
    ("camfail_quadratic", {"h": "sign-power-1.4"}),
)


class ConfigError(ValueError):
    """Invalid or inconsistent settings."""


# --- argument types -----------------------------------------------------------

def _eta(text):
    if str(text).strip().lower() == "auto":
        return "auto"
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("eta must be positive or 'auto'")
    return v


def _k(text):
    return "auto" if str(text).strip().lower() == "auto" else int(text)


def _regressor(text):
    key = str(text).strip().lower()
    if key not in REGRESSOR_ALIASES:
        raise argparse.ArgumentTypeError(f"unknown regressor {text!r}")
    return REGRESSOR_ALIASES[key]


def _graph_token(text):
    tok = str(text).strip().lower()
    if not re.fullmatch(r"(mc|er|sf)(\d*)", tok):
        raise argparse.ArgumentTypeError(f"graph must be mc, erK or sfK, got {text!r}")
    return tok


def _int_list(text) -> list[int]:
    """``"0-4"`` or ``"1,3,5"`` or a mix like ``"0-2,7"``."""
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(-?\d+)-(-?\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise argparse.ArgumentTypeError(f"empty range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _list_of(conv):
    def parse(text):
        items = [conv(p.strip()) for p in str(text).split(",") if p.strip()]
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        return items
    parse.__name__ = f"list_of_{conv.__name__}"
    return parse


def _model_name(text):
    name = str(text).strip()
    if name.lower() in MODEL_KINDS:
        return name.lower()
    if name in NAMED_MODELS:
        return name
    raise argparse.ArgumentTypeError(f"unknown model {text!r}")


def _bool(text) -> bool:
    val = str(text).strip().lower()
    if val in ("1", "true", "yes", "on"):
        return True
    if val in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


# --- parser -------------------------------------------------------------------

DEFAULTS = {
    "common": {"out": None, "config": None},
    "npvar": {
        "preset": "default", "eta": "auto", "regressor": "kernel_smoother",
        "bandwidth_scale": 1.0, "k": "auto", "max_sweeps": 20, "tolerance": 1e-6,
        "seed": 0, "disable_split": False, "max_layers": None, "centered": False,
        "n_jobs": 1, "prune": False, "tau": 0.05, "holdout": 0.5, "max_parents": None,
    },
    "generate": {
        "graph": "mc", "model": "sin", "d": 10, "n": 1000, "sigma2": 0.5, "p": 0.1,
        "edges": None, "seed": 0, "data_seed": None, "g": "sin", "h": "sin",
        "delta": 0.1, "sigma3": 0.5, "stem": "data",
    },
    "learn": {"data": None, "stem": "learn"},
    "evaluate": {"estimate": None, "truth": None, "stem": "evaluate"},
    "bench": {
        "graphs": ["mc"], "models": ["sin"], "ds": [5], "ns": [1000], "sigma2": 0.5,
        "p": 0.1, "seeds": list(range(3)), "methods": ["npvar"], "jobs": 1,
        "save_data": True, "plot": False, "max_cells": None, "preset": "benchmark",
        "prune": True,
    },
    "repro": {"preset_name": None, "seeds": None, "ns": None, "jobs": 1, "plot": False},
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file; the section named after the command is read")
    p.add_argument("--out", help=f"output directory (default ${ENV_OUT} or .)")


def _npvar_options(p: argparse.ArgumentParser):
    g = p.add_argument_group("layer search")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--eta", type=_eta, help="threshold or 'auto'")
    g.add_argument("--regressor", type=_regressor, help="kernel, knn or additive")
    g.add_argument("--bandwidth-scale", type=float)
    g.add_argument("--k", type=_k, help="neighbours for knn, or 'auto'")
    g.add_argument("--max-sweeps", type=int)
    g.add_argument("--tolerance", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--disable-split", action=argparse.BooleanOptionalAction)
    g.add_argument("--max-layers", type=int)
    g.add_argument("--centered", action=argparse.BooleanOptionalAction)
    g.add_argument("--n-jobs", type=int, help="threads per regression round")
    g = p.add_argument_group("pruning")
    g.add_argument("--prune", action=argparse.BooleanOptionalAction)
    g.add_argument("--tau", type=float)
    g.add_argument("--holdout", type=float)
    g.add_argument("--max-parents", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="npdag", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"npdag {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    kw = {"argument_default": argparse.SUPPRESS}

    p = sub.add_parser("generate", help="simulate a dataset with its truth DAG", **kw)
    _common(p)
    p.add_argument("--graph", type=_graph_token, help="mc, erK or sfK (K = edges per node)")
    p.add_argument("--model", type=_model_name,
                   help=f"one of {', '.join(MODEL_KINDS + NAMED_MODELS)}")
    p.add_argument("--d", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--p", type=float, help="flip probability for glm")
    p.add_argument("--edges", type=float, help="expected edge count (overrides K)")
    p.add_argument("--seed", type=int, help="graph and mechanism seed")
    p.add_argument("--data-seed", type=int, help=f"noise seed (default seed + {DATA_SEED_OFFSET})")
    p.add_argument("--g", help="nonlinearity for eq5 / camfail_gdelta")
    p.add_argument("--h", help="nonlinearity for camfail_quadratic")
    p.add_argument("--delta", type=float)
    p.add_argument("--sigma3", type=float, help="third noise variance for exampleB1")
    p.add_argument("--stem")

    p = sub.add_parser("learn", help="estimate layers (and optionally a DAG) from a CSV", **kw)
    _common(p)
    p.add_argument("--data", help="input CSV with a header row")
    p.add_argument("--stem")
    _npvar_options(p)

    p = sub.add_parser("evaluate", help="score an estimate against a truth DAG", **kw)
    _common(p)
    p.add_argument("--estimate", help="learn result JSON or DAG edge-list CSV")
    p.add_argument("--truth", help="truth DAG edge-list CSV")
    p.add_argument("--stem")

    p = sub.add_parser("bench", help="run a grid of settings x seeds", **kw)
    _common(p)
    p.add_argument("--graphs", type=_list_of(_graph_token))
    p.add_argument("--models", type=_list_of(_model_name))
    p.add_argument("--ds", type=_list_of(int))
    p.add_argument("--ns", type=_list_of(int))
    p.add_argument("--sigma2", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--seeds", type=_int_list, help="e.g. 0-29 or 1,4,9")
    p.add_argument("--methods", type=_list_of(str), help="npvar, eqvar, greedy")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("--save-data", action=argparse.BooleanOptionalAction)
    p.add_argument("--plot", action=argparse.BooleanOptionalAction)
    p.add_argument("--max-cells", type=int, help="stop after this many new cells")
    _npvar_options(p)

    p = sub.add_parser("repro", help="run a reproduction preset", **kw)
    _common(p)
    p.add_argument("preset_name", choices=REPRO_PRESETS, metavar="preset",
                   help=" | ".join(REPRO_PRESETS))
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--ns", type=_list_of(int))
    p.add_argument("--jobs", type=int)
    p.add_argument("--plot", action=argparse.BooleanOptionalAction)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)  # pragma: no cover


def _config_values(path: str, command: str, sub: argparse.ArgumentParser) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not cp.has_section(command):
        return {}
    actions = {a.dest: a for a in sub._actions}
    out = {}
    for key, raw in cp.items(command):
        dest = key.strip().replace("-", "_")
        if dest == "preset" and command == "repro":
            dest = "preset_name"
        if dest not in actions or dest in ("help", "config"):
            raise ConfigError(f"{path} [{command}]: unknown key {key!r}")
        act = actions[dest]
        try:
            if isinstance(act, argparse.BooleanOptionalAction):
                val = _bool(raw)
            elif act.type is not None:
                val = act.type(raw)
            else:
                val = raw.strip()
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ConfigError(f"{path} [{command}] {key}: {exc}") from None
        if act.choices is not None and val not in act.choices:
            raise ConfigError(f"{path} [{command}] {key}: {raw!r} not in {sorted(act.choices)}")
        out[dest] = val
    return out


def resolve_settings(argv=None) -> dict:
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    command = ns.pop("command")
    settings = dict(DEFAULTS["common"])
    settings.update(DEFAULTS[command])
    if command in ("learn", "bench"):
        base = dict(DEFAULTS["npvar"])
        base.update(DEFAULTS[command])
        settings.update(base)
    conf = {}
    if ns.get("config"):
        conf = _config_values(ns["config"], command, _subparser(parser, command))
    preset = ns.get("preset", conf.get("preset", settings.get("preset")))
    if preset is not None and command in ("learn", "bench"):
        settings.update(PRESETS[preset])
    settings.update(conf)
    settings.update(ns)
    settings["command"] = command
    if settings.get("out") is None:
        settings["out"] = os.environ.get(ENV_OUT) or "."
    return settings


# --- shared helpers -------------------------------------------------------------

def _write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _meta(command: str, started: float, **extra) -> dict:
    return {
        "command": command,
        "version": __version__,
        "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "wall_seconds": round(time.perf_counter() - started, 3),
        **extra,
    }


def npvar_config(s: dict) -> NpvarConfig:
    try:
        spec = RegressorSpec(kind=s["regressor"], bandwidth_scale=float(s["bandwidth_scale"]),
                             k=s["k"], max_sweeps=int(s["max_sweeps"]),
                             tolerance=float(s["tolerance"]))
        return NpvarConfig(eta=s["eta"], spec=spec, seed=int(s["seed"]),
                           disable_split=bool(s["disable_split"]), max_layers=s["max_layers"],
                           centered=bool(s["centered"]), n_jobs=int(s["n_jobs"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def prune_config(s: dict, spec: RegressorSpec) -> PruneConfig:
    try:
        return PruneConfig(spec=spec, tau=float(s["tau"]), holdout=float(s["holdout"]),
                           max_parents=s["max_parents"], seed=int(s["seed"]),
                           n_jobs=int(s["n_jobs"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def expected_edges(token: str, d: int, edges=None) -> float:
    kind, k = re.fullmatch(r"(mc|er|sf)(\d*)", token).groups()
    if edges is not None:
        return float(edges)
    if kind == "mc":
        return float(d - 1)
    return float((int(k) if k else 1) * d)


def build_model(graph: str, model: str, d: int, sigma2: float, seed: int, p: float = 0.1,
                edges=None, **named):
    """Return ``(model, expected_edges)`` for a generated or named setting."""
    if model in NAMED_MODELS:
        params = {k: v for k, v in named.items() if v is not None}
        if model in ("eq5", "camfail_gdelta"):
            params.pop("h", None)
        if model == "camfail_quadratic":
            params.pop("g", None)
        if model != "camfail_gdelta":
            params.pop("delta", None)
        if model != "exampleB1":
            params.pop("sigma3", None)
        else:
            params = {"sigma3": params.get("sigma3", 0.5)}
        m = named_model(model, **params)
        return m, float(len(m.dag.edges))
    E = expected_edges(graph, d, edges)
    kind = graph[:2]
    dag = gen_graph(kind, d, E, seed)
    return attach_mechanisms(dag, model, sigma2=sigma2, seed=seed, p=p), E


def layering_from_names(layers, names) -> LayerDecomposition:
    index = {n: i for i, n in enumerate(names)}
    try:
        return LayerDecomposition(tuple(frozenset(index[v] for v in layer) for layer in layers))
    except KeyError as exc:
        raise DataError(f"unknown node name {exc.args[0]!r} in layers") from None


def _parallel_map(fn, tasks: list, jobs: int):
    """Yield ``(index, result)`` as cells finish; bounded pool when jobs > 1."""
    if jobs <= 1 or len(tasks) <= 1:
        for i, t in enumerate(tasks):
            yield i, fn(t)
        return
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        futures = {ex.submit(fn, t): i for i, t in enumerate(tasks)}
        for fut in as_completed(futures):
            yield futures[fut], fut.result()


# --- generate -------------------------------------------------------------------

def cmd_generate(s: dict) -> dict:
    started = time.perf_counter()
    d, n = int(s["d"]), int(s["n"])
    seed = int(s["seed"])
    data_seed = int(s["data_seed"]) if s["data_seed"] is not None else seed + DATA_SEED_OFFSET
    try:
        model, E = build_model(s["graph"], s["model"], d, float(s["sigma2"]), seed,
                               p=float(s["p"]), edges=s["edges"], g=s["g"], h=s["h"],
                               delta=s["delta"], sigma3=s["sigma3"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if n < 1:
        raise ConfigError("n must be at least 1")
    ds = simulate_dataset(model, n, data_seed)
    out = s["out"]
    os.makedirs(out, exist_ok=True)
    stem = s["stem"]
    paths = {
        "data": os.path.join(out, f"{stem}.csv"),
        "truth": os.path.join(out, f"{stem}_truth.csv"),
        "manifest": os.path.join(out, f"{stem}_manifest.json"),
    }
    write_csv(ds, paths["data"])
    write_dag(model.dag, paths["truth"])
    manifest = model_manifest(
        model, graph_file=os.path.basename(paths["truth"]),
        data_file=os.path.basename(paths["data"]), graph=s["graph"] if s["model"] not in NAMED_MODELS
        else None, expected_edges=E, n=n, data_seed=data_seed,
    )
    _write_json(paths["manifest"], manifest)
    _write_json(os.path.join(out, f"{stem}_meta.json"), _meta("generate", started))
    return {"schema": 1, "files": paths, "n": ds.n, "d": ds.d}


# --- learn ----------------------------------------------------------------------

def learn_record(ds: Dataset, s: dict) -> tuple[dict, object, Dag | None]:
    cfg = npvar_config(s)
    res = npvar_layers(ds, cfg)
    names = list(ds.names)
    out = res.to_dict()
    out.update(
        names=names,
        ordering=[names[v] for v in res.ordering.perm],
        regression_calls=res.regression_calls,
        config={"npvar": asdict(cfg), "prune": None},
    )
    dag = None
    if s["prune"]:
        pcfg = prune_config(s, cfg.spec)
        dag = prune_parents(ds, res.ordering, pcfg)
        out["config"]["prune"] = asdict(pcfg)
        out["edges"] = [[names[i], names[j]] for i, j in sorted(dag.edges)]
    return out, res, dag


def cmd_learn(s: dict) -> dict:
    started = time.perf_counter()
    if not s["data"]:
        raise ConfigError("learn needs --data")
    if not os.path.exists(s["data"]):
        raise ConfigError(f"data file not found: {s['data']}")
    ds = read_csv(s["data"])
    out_rec, res, dag = learn_record(ds, s)
    out_rec["data"] = os.path.basename(s["data"])
    out = s["out"]
    os.makedirs(out, exist_ok=True)
    files = {"result": os.path.join(out, f"{s['stem']}_result.json")}
    _write_json(files["result"], out_rec)
    if dag is not None:
        files["dag"] = os.path.join(out, f"{s['stem']}_dag.csv")
        write_dag(dag, files["dag"])
    _write_json(os.path.join(out, f"{s['stem']}_meta.json"), _meta("learn", started))
    return {"schema": 1, "files": files, "layers": out_rec["layers"],
            "eta_used": out_rec["eta_used"]}


# --- evaluate -------------------------------------------------------------------

def evaluate_estimate(estimate, truth: Dag) -> dict:
    """``estimate`` is a Dag, an Ordering, a LayerDecomposition or a
    ``(LayerDecomposition, Dag | None)`` pair."""
    dag = None
    if isinstance(estimate, tuple):
        estimate, dag = estimate
    if isinstance(estimate, Dag):
        dag = estimate
        if dag.d != truth.d:
            raise DataError(f"dimension mismatch: estimate d={dag.d}, truth d={truth.d}")
        try:
            # some ordering is consistent with both graphs iff their union is acyclic
            Dag(truth.d, dag.edges | truth.edges)
            ok = True
        except CycleError:
            ok = False
    elif isinstance(estimate, LayerDecomposition):
        if len(estimate.nodes) != truth.d:
            raise DataError(f"dimension mismatch: estimate has {len(estimate.nodes)} nodes, "
                            f"truth d={truth.d}")
        ok = is_consistent_layering(truth, estimate)
    elif isinstance(estimate, Ordering):
        if len(estimate) != truth.d:
            raise DataError(f"dimension mismatch: ordering has {len(estimate)} nodes, "
                            f"truth d={truth.d}")
        ok = is_consistent_ordering(truth, estimate)
    else:
        raise TypeError(f"cannot evaluate {type(estimate).__name__}")
    if dag is not None and dag.d != truth.d:
        raise DataError(f"dimension mismatch: estimate d={dag.d}, truth d={truth.d}")
    return {"order_correct": bool(ok), "shd": None if dag is None else shd(dag, truth)}


def _load_estimate(path: str, d: int):
    if path.endswith(".json"):
        with open(path) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: {exc}") from None
        names = obj.get("names") or [f"X{j + 1}" for j in range(d)]
        index = {n: i for i, n in enumerate(names)}

        def idx(v):
            if isinstance(v, int):
                return v - 1
            if v not in index:
                raise DataError(f"{path}: unknown node {v!r}")
            return index[v]

        dag = None
        if obj.get("edges") is not None:
            dag = Dag(len(names), frozenset((idx(a), idx(b)) for a, b in obj["edges"]))
        if obj.get("layers"):
            return layering_from_names(obj["layers"], names), dag
        if obj.get("ordering"):
            return Ordering(tuple(idx(v) for v in obj["ordering"])), dag
        if dag is not None:
            return dag
        raise DataError(f"{path}: no layers, ordering or edges")
    try:
        return read_dag(path)
    except (ValueError, CycleError) as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_evaluate(s: dict) -> dict:
    for key in ("estimate", "truth"):
        if not s[key]:
            raise ConfigError(f"evaluate needs --{key}")
        if not os.path.exists(s[key]):
            raise ConfigError(f"file not found: {s[key]}")
    try:
        truth = read_dag(s["truth"])
    except (ValueError, CycleError) as exc:
        raise DataError(f"{s['truth']}: {exc}") from None
    metrics = {"schema": 1, **evaluate_estimate(_load_estimate(s["estimate"], truth.d), truth)}
    os.makedirs(s["out"], exist_ok=True)
    _write_json(os.path.join(s["out"], f"{s['stem']}_metrics.json"), metrics)
    return metrics


# --- bench ----------------------------------------------------------------------

BENCH_METHODS = ("npvar", "eqvar", "greedy")
REPORT_FIELDS = ("setting", "graph", "model", "d", "n", "sigma2", "method", "runs", "failures",
                 "recovery_rate", "shd_mean", "shd_se")


def setting_key(graph, model, d, n, sigma2, method) -> str:
    return f"{graph}-{model}-d{d}-n{n}-s{sigma2:g}-{method}"


def run_cell(task: dict) -> dict:
    """One (setting, seed) cell. Never raises: failures are recorded."""
    rec = {k: task[k] for k in ("setting", "seed", "graph", "model", "d", "n", "sigma2", "method")}
    rec.update(order_correct=None, shd=None, eta_used=None, error=None)
    started = time.perf_counter()
    try:
        s = task["settings"]
        model, _ = build_model(task["graph"], task["model"], task["d"], task["sigma2"],
                               task["seed"], p=task["p"])
        ds = simulate_dataset(model, task["n"], task["seed"] + DATA_SEED_OFFSET)
        if task.get("save_dir"):
            cell_dir = os.path.join(task["save_dir"], f"{task['setting']}_seed{task['seed']}")
            os.makedirs(cell_dir, exist_ok=True)
            write_csv(ds, os.path.join(cell_dir, "data.csv"))
            write_dag(model.dag, os.path.join(cell_dir, "truth.csv"))
            _write_json(os.path.join(cell_dir, "manifest.json"),
                        model_manifest(model, graph_file="truth.csv", data_file="data.csv",
                                       n=task["n"], data_seed=task["seed"] + DATA_SEED_OFFSET))
        s = dict(s, seed=task["seed"])
        cfg = npvar_config(s)
        method = task["method"]
        if method == "npvar":
            res = npvar_layers(ds, cfg)
            rec["order_correct"] = is_consistent_layering(model.dag, res.layers)
            rec["eta_used"] = res.eta_used
            ordering = res.ordering
        elif method == "eqvar":
            ordering = eqvar_linear_order(ds)
            rec["order_correct"] = is_consistent_ordering(model.dag, ordering)
        elif method == "greedy":
            src = PluginVarianceSource(ds, cfg.spec, seed=cfg.seed,
                                       disable_split=cfg.disable_split)
            ordering, _ = greedy_incedge_order(src)
            rec["order_correct"] = is_consistent_ordering(model.dag, ordering)
        else:
            raise ConfigError(f"unknown method {method!r}")
        if s["prune"]:
            rec["shd"] = shd(prune_parents(ds, ordering, prune_config(s, cfg.spec)), model.dag)
    except Exception as exc:  # recorded per cell; the grid keeps going
        rec["error"] = f"{type(exc).__name__}: {exc}"
    rec["runtime_ms"] = round(1000 * (time.perf_counter() - started), 3)
    return rec


def read_records(path: str) -> dict:
    """Completed records keyed by (setting, seed); a torn last line is ignored."""
    done: dict = {}
    if not os.path.exists(path):
        return done
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                continue
            done.setdefault((rec["setting"], rec["seed"]), rec)
    return done


def _sort_key(rec: dict):
    return (rec["graph"], rec["model"], rec["d"], rec["n"], rec["sigma2"], rec["method"])


def aggregate(records: list[dict]) -> list[dict]:
    groups: dict = {}
    for rec in records:
        groups.setdefault(rec["setting"], []).append(rec)
    rows = []
    for key, recs in sorted(groups.items(), key=lambda kv: _sort_key(kv[1][0])):
        ok = [r for r in recs if r["error"] is None]
        shds = [r["shd"] for r in ok if r["shd"] is not None]
        first = recs[0]
        row = {f: first[f] for f in ("graph", "model", "d", "n", "sigma2", "method")}
        row.update(
            setting=key, runs=len(ok), failures=len(recs) - len(ok),
            recovery_rate=(sum(bool(r["order_correct"]) for r in ok) / len(ok)) if ok else None,
            shd_mean=float(np.mean(shds)) if shds else None,
            shd_se=float(np.std(shds, ddof=1) / math.sqrt(len(shds))) if len(shds) > 1 else None,
        )
        rows.append(row)
    return rows


def _csv_text(rows: list[dict], fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fields})
    return buf.getvalue()


def _timing_rows(records: list[dict]) -> list[dict]:
    groups: dict = {}
    for rec in records:
        groups.setdefault(rec["setting"], []).append(rec["runtime_ms"])
    rows = []
    for key, ts in sorted(groups.items()):
        q = np.quantile(ts, [0.1, 0.5, 0.9])
        rows.append({"setting": key, "runtime_ms_p10": round(float(q[0]), 3),
                     "runtime_ms_p50": round(float(q[1]), 3),
                     "runtime_ms_p90": round(float(q[2]), 3)})
    return rows


def plot_curves(rows: list[dict], metric: str, path: str, x: str = "n") -> bool:
    """Static SVG line chart of ``metric`` against ``x``; False when
    matplotlib is unavailable."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        matplotlib.rcParams["svg.hashsalt"] = "npdag"
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    lines: dict = {}
    for row in rows:
        if row.get(metric) is None:
            continue
        label = row.get("label") or f"{row['graph']}-{row['model']}-d{row['d']}-{row['method']}"
        lines.setdefault(label, []).append((row[x], row[metric]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, pts in sorted(lines.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel(x)
    ax.set_ylabel(metric)
    if lines:
        ax.legend(fontsize=7)
    fig.tight_layout()
    tmp = f"{path}.tmp{os.getpid()}.svg"
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    os.replace(tmp, path)
    return True


def bench_tasks(s: dict) -> list[dict]:
    methods = [m.lower() for m in s["methods"]]
    for m in methods:
        if m not in BENCH_METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {BENCH_METHODS}")
    if not s["seeds"]:
        raise ConfigError("seeds must be non-empty")
    npvar_config(s)  # validate early
    settings = {k: s[k] for k in DEFAULTS["npvar"]}
    tasks = []
    for graph in s["graphs"]:
        for model in s["models"]:
            for d in s["ds"]:
                for n in s["ns"]:
                    for method in methods:
                        key = setting_key(graph, model, d, n, float(s["sigma2"]), method)
                        for seed in s["seeds"]:
                            tasks.append({
                                "setting": key, "seed": int(seed), "graph": graph,
                                "model": model, "d": int(d), "n": int(n),
                                "sigma2": float(s["sigma2"]), "p": float(s["p"]),
                                "method": method, "settings": settings,
                            })
    return tasks


def cmd_bench(s: dict) -> dict:
    started = time.perf_counter()
    out = s["out"]
    os.makedirs(out, exist_ok=True)
    tasks = bench_tasks(s)
    rec_path = os.path.join(out, "records.jsonl")
    done = read_records(rec_path)
    wanted = {(t["setting"], t["seed"]) for t in tasks}
    todo = [t for t in tasks if (t["setting"], t["seed"]) not in done]
    if s["max_cells"] is not None:
        todo = todo[: int(s["max_cells"])]
    if s["save_data"]:
        for t in todo:
            t["save_dir"] = os.path.join(out, "cells")
    # the main process is the only writer
    with open(rec_path, "a") as fh:
        for _, rec in _parallel_map(run_cell, todo, int(s["jobs"])):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            done[(rec["setting"], rec["seed"])] = rec
    records = [done[k] for k in sorted(done) if k in wanted]
    rows = aggregate(records)
    complete = len(records) == len(tasks)
    report = {"schema": 1, "complete": complete, "records": len(records),
              "expected_records": len(tasks), "settings": rows}
    _write_json(os.path.join(out, "report.json"), report)
    atomic_write(os.path.join(out, "report.csv"), _csv_text(rows, REPORT_FIELDS))
    atomic_write(os.path.join(out, "timing.csv"),
                 _csv_text(_timing_rows(records),
                           ("setting", "runtime_ms_p10", "runtime_ms_p50", "runtime_ms_p90")))
    if s["plot"]:
        for metric in ("recovery_rate", "shd_mean"):
            plot_curves(rows, metric, os.path.join(out, f"{metric}.svg"))
    _write_json(os.path.join(out, "bench_meta.json"),
                _meta("bench", started, new_cells=len(todo)))
    return {"schema": 1, "complete": complete, "records": len(records),
            "expected_records": len(tasks),
            "failures": sum(r["error"] is not None for r in records)}


# --- repro ----------------------------------------------------------------------

def appendix_c_table() -> dict:
    model = named_model("camfail_linear")
    glm = GaussianLinearModel.from_sem(model)
    var = [gaussian_linear_cond_var(glm, j, ()) for j in range(3)]
    rows = []
    for j in range(3):
        for i in range(3):
            if i == j:
                continue
            cv = gaussian_linear_cond_var(glm, j, (i,))
            rows.append({"target": j + 1, "given": i + 1, "cond_var": cv,
                         "log_ratio": math.log(var[j] / cv)})
    oracle = GaussianLinearOracle(glm)
    greedy, steps = greedy_incedge_order(oracle)
    pop = population_order(oracle, 3)
    return {
        "schema": 1, "preset": "appendixC_table",
        "variances": [{"node": j + 1, "var": v} for j, v in enumerate(var)],
        "log_ratios": rows,
        "greedy_order": [v + 1 for v in greedy.perm],
        "greedy_edges": [[st.parent + 1, st.child + 1, st.gain] for st in steps],
        "greedy_consistent": is_consistent_ordering(model.dag, greedy),
        "population_order": [v + 1 for v in pop.perm],
    }


def example_b1_checks(n_outer: int = 2000, n_inner: int = 2000, seed: int = 0) -> dict:
    out = []
    for s3 in (0.5, 1.0 / 3.0):
        model = named_model("exampleB1", sigma3=s3)
        exact = {
            "var_x2": 2 / 3 + 1 / 2,
            "var_x3": s3 + 8 / 9 + 8 / 81,
            "evar_x3_given_x1": s3 + 1 / 3 - 1 / 81,
        }
        queries = {"var_x2": (1, ()), "var_x3": (2, ()), "evar_x3_given_x1": (2, (0,))}
        checks = []
        for name, (t, cond) in queries.items():
            est, se = chain_mc_cond_var(model, t, cond, n_outer, n_inner, seed=seed)
            z = (est - exact[name]) / se if se > 0 else 0.0
            checks.append({"quantity": name, "exact": exact[name], "mc": est, "se": se, "z": z})
        # after X1, the next source must beat X3: sigma_2^2 < E var(X3 | X1)
        out.append({
            "sigma3": s3, "checks": checks,
            "sigma2_2": 2 / 3, "competitor": exact["evar_x3_given_x1"],
            "identifiable": 2 / 3 < exact["evar_x3_given_x1"],
        })
    return {"schema": 1, "preset": "exampleB1", "cases": out}


def misspec_cell(task: dict) -> dict:
    model = named_model("exampleB1", sigma3=task["sigma3"])
    ds = simulate_dataset(model, task["n"], task["seed"] + DATA_SEED_OFFSET)
    cfg = NpvarConfig(spec=RegressorSpec("kernel_smoother"), seed=task["seed"],
                      disable_split=True)
    res = npvar_layers(ds, cfg)
    return {**task, "correct": is_consistent_layering(model.dag, res.layers)}


def camfail_cell(task: dict) -> dict:
    model = named_model(task["model"], **task["params"])
    ds = simulate_dataset(model, task["n"], task["seed"] + DATA_SEED_OFFSET)
    spec = RegressorSpec("additive_backfit")
    res = npvar_layers(ds, NpvarConfig(spec=spec, seed=task["seed"], disable_split=True))
    src = PluginVarianceSource(ds, spec, seed=task["seed"], disable_split=True)
    greedy, _ = greedy_incedge_order(src)
    return {**task, "npvar": is_consistent_layering(model.dag, res.layers),
            "greedy": is_consistent_ordering(model.dag, greedy)}


def misspec_curves(seeds, ns, jobs: int = 1) -> list[dict]:
    tasks = [{"sigma3": s3, "n": n, "seed": s}
             for s3 in (0.5, 1.0 / 3.0) for n in ns for s in seeds]
    hits: dict = {}
    for _, r in _parallel_map(misspec_cell, tasks, jobs):
        hits.setdefault((r["sigma3"], r["n"]), []).append(r["correct"])
    return [{"sigma3": s3, "n": n, "runs": len(v), "recovery_rate": sum(v) / len(v)}
            for (s3, n), v in sorted(hits.items(), key=lambda kv: (-kv[0][0], kv[0][1]))]


def camfail_curves(seeds, ns, jobs: int = 1) -> list[dict]:
    tasks = [{"model": m, "params": p, "n": n, "seed": s}
             for m, p in CAMFAIL_VARIANTS for n in ns for s in seeds]
    hits: dict = {}
    for _, r in _parallel_map(camfail_cell, tasks, jobs):
        label = r["model"] + "(" + ",".join(f"{k}={v}" for k, v in sorted(r["params"].items())) + ")"
        hits.setdefault((label, r["n"]), []).append((r["npvar"], r["greedy"]))
    rows = []
    for (label, n), v in sorted(hits.items()):
        rows.append({"variant": label, "n": n, "runs": len(v),
                     "npvar_rate": sum(a for a, _ in v) / len(v),
                     "greedy_rate": sum(b for _, b in v) / len(v)})
    return rows


def cmd_repro(s: dict) -> dict:
    started = time.perf_counter()
    name = s["preset_name"]
    if name is None:
        raise ConfigError("repro needs a preset")
    out = s["out"]
    os.makedirs(out, exist_ok=True)
    jobs = int(s["jobs"])
    if name == "appendixC_table":
        report = appendix_c_table()
    elif name == "exampleB1":
        report = example_b1_checks()
    elif name == "misspec":
        seeds = s["seeds"] or list(range(50))
        ns = s["ns"] or [50, 200, 500, 1000]
        rows = misspec_curves(seeds, ns, jobs)
        report = {"schema": 1, "preset": name, "curves": rows}
        atomic_write(os.path.join(out, "repro_misspec.csv"),
                     _csv_text(rows, ("sigma3", "n", "runs", "recovery_rate")))
        if s["plot"]:
            plot_curves([dict(r, label=f"sigma3^2={r['sigma3']:.3g}") for r in rows],
                        "recovery_rate", os.path.join(out, "repro_misspec.svg"))
    else:
        seeds = s["seeds"] or list(range(30))
        ns = s["ns"] or [100, 200, 500, 750, 1000]
        rows = camfail_curves(seeds, ns, jobs)
        report = {"schema": 1, "preset": name, "curves": rows}
        atomic_write(os.path.join(out, "repro_camfail.csv"),
                     _csv_text(rows, ("variant", "n", "runs", "npvar_rate", "greedy_rate")))
        if s["plot"]:
            long = [dict(n=r["n"], label=f"{r['variant']} {meth}", rate=r[f"{meth}_rate"])
                    for r in rows for meth in ("npvar", "greedy")]
            plot_curves(long, "rate", os.path.join(out, "repro_camfail.svg"))
    _write_json(os.path.join(out, f"repro_{name}.json"), report)
    _write_json(os.path.join(out, f"repro_{name}_meta.json"), _meta("repro", started))
    return report


# --- entry point ----------------------------------------------------------------

COMMANDS = {"generate": cmd_generate, "learn": cmd_learn, "evaluate": cmd_evaluate,
            "bench": cmd_bench, "repro": cmd_repro}


def _fail(code: int, kind: str, exc: BaseException) -> int:
    err = {"schema": 1, "status": "error", "code": code, "kind": kind,
           "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        s = resolve_settings(argv)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except SystemExit as exc:  # argparse usage errors exit with 2 already
        return int(exc.code or 0)
    try:
        result = COMMANDS[s["command"]](s)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except (DataError, RegressionError, OracleError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except OSError as exc:
        return _fail(EXIT_CONFIG, "io", exc)
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
