"""Command-line entry point: config ingestion, dispatch and result files.

Config files are TOML::

    n_iters = 5000
    n_runs = 100
    master_seed = 1
    policies = ["uniform", "relative-variance", "gramian", "gramian-diag"]

    [topology]
    n_nodes = 20
    model = "random"
    p = 0.25

    [nodes]
    dim = 10

Policies may instead be given as ``[[policies]]`` tables with ``name``,
``alpha1`` and ``alpha2``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import platform
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy
import tomli

from . import __version__
from .combiners import STATIC_POLICIES, PolicyError, static_policy
from .diffusion import PolicySpec, SimulationError
from .harness import (
    ConfigError,
    ExperimentConfig,
    NodeConfig,
    RunResult,
    TopologyConfig,
    prepare_experiment,
    run_experiment,
)
from .model import CalibrationError
from .network import TopologyError
from .theory import TheoryError, to_db

__all__ = ["parse_config", "load_config", "emit_results", "main", "EmitError"]

EXIT_CONFIG = 2
EXIT_CALIBRATION = 3
EXIT_RUNTIME = 4
EXIT_IO = 5

CURVE_COLUMNS = ("iteration", "policy", "sd_linear", "sd_db")


class EmitError(OSError):
    pass


def fmt(x: float) -> str:
    """17 significant digits: parses back to the identical double."""
    return format(float(x), ".17g")


_TOP_KEYS = {
    "n_iters": int,
    "n_runs": int,
    "master_seed": int,
    "tail_window": float,
    "workers": int,
    "batch_size": int,
}
_TOPOLOGY_KEYS = {"model": str, "n_nodes": int, "p": float, "seed": int, "adjacency": str}
_NODE_KEYS = {
    "dim": int,
    "step": (float, list),
    "target_reg": float,
    "mean_range": list,
    "var_range": list,
    "mean_scale": list,
    "var": list,
    "param_seed": int,
    "calibration_method": str,
    "calibration_samples": int,
    "calibration_tol": float,
    "statistics_samples": int,
}
_OUTPUT_KEYS = {"dir": str, "weights": bool, "probes": bool}
_POLICY_KEYS = {"name": str, "alpha1": float, "alpha2": float}


def _check(section: str, key: str, value: Any, expected) -> Any:
    types = expected if isinstance(expected, tuple) else (expected,)
    ok = False
    for typ in types:
        if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            value, ok = float(value), True
        elif typ is int and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        elif typ is list and isinstance(value, list):
            ok = True
        elif typ in (str, bool) and isinstance(value, typ):
            ok = True
        if ok:
            break
    if not ok:
        names = " or ".join(t.__name__ for t in types)
        raise ConfigError(f"{section}{key}: expected {names}, got {type(value).__name__}")
    return value


def _section(raw: dict, allowed: dict, section: str) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in allowed:
            raise ConfigError(f"{section}{key}: unknown key")
        out[key] = _check(section, key, value, allowed[key])
    return out


def _float_list(section: str, key: str, values: list, length: int | None = None) -> tuple:
    try:
        out = tuple(float(v) for v in values if not isinstance(v, bool))
    except (TypeError, ValueError):
        raise ConfigError(f"{section}{key}: expected a list of numbers") from None
    if len(out) != len(values) or (length is not None and len(out) != length):
        want = f"{length} numbers" if length is not None else "numbers only"
        raise ConfigError(f"{section}{key}: expected {want}")
    return out


def _parse_policies(raw) -> tuple[PolicySpec, ...]:
    if not isinstance(raw, list):
        raise ConfigError("policies: expected a list")
    out = []
    for j, item in enumerate(raw):
        if isinstance(item, str):
            out.append(PolicySpec(item))
        elif isinstance(item, dict):
            fields = _section(item, _POLICY_KEYS, f"policies[{j}].")
            if "name" not in fields:
                raise ConfigError(f"policies[{j}].name: missing")
            out.append(PolicySpec(**fields))
        else:
            raise ConfigError(f"policies[{j}]: expected a name or a table")
    return tuple(out)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a decoded config mapping, fill defaults, reject unknown keys."""
    raw = dict(raw)
    topo_raw = raw.pop("topology", {})
    nodes_raw = raw.pop("nodes", {})
    output_raw = raw.pop("output", {})
    policies_raw = raw.pop("policies", None)
    for name, sec in (("topology", topo_raw), ("nodes", nodes_raw), ("output", output_raw)):
        if not isinstance(sec, dict):
            raise ConfigError(f"{name}: expected a table")
    top = _section(raw, _TOP_KEYS, "")
    topo = _section(topo_raw, _TOPOLOGY_KEYS, "topology.")
    nodes = _section(nodes_raw, _NODE_KEYS, "nodes.")
    output = _section(output_raw, _OUTPUT_KEYS, "output.")
    if policies_raw is None:
        raise ConfigError("policies: missing (list the policies to simulate)")

    for key in ("mean_range", "var_range"):
        if key in nodes:
            nodes[key] = _float_list("nodes.", key, nodes[key], 2)
    for key in ("mean_scale", "var"):
        if key in nodes:
            nodes[key] = _float_list("nodes.", key, nodes[key])
    if isinstance(nodes.get("step"), list):
        nodes["step"] = _float_list("nodes.", "step", nodes["step"])

    try:
        cfg = ExperimentConfig(
            topology=TopologyConfig(**topo),
            nodes=NodeConfig(**nodes),
            policies=_parse_policies(policies_raw),
            out_dir=output.get("dir", "results"),
            log_weights=output.get("weights", False),
            probes=output.get("probes", False),
            **top,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


load_config = parse_config


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Plain-data echo of a resolved config, loadable by :func:`config_from_dict`."""
    topo = {k: v for k, v in dataclasses.asdict(cfg.topology).items() if v is not None}
    nodes = {}
    for k, v in dataclasses.asdict(cfg.nodes).items():
        if v is None:
            continue
        nodes[k] = list(v) if isinstance(v, tuple) else v
    return {
        "n_iters": cfg.n_iters,
        "n_runs": cfg.n_runs,
        "master_seed": cfg.master_seed,
        "tail_window": cfg.tail_window,
        "workers": cfg.workers,
        "batch_size": cfg.batch_size,
        "policies": [dataclasses.asdict(p) for p in cfg.policies],
        "topology": topo,
        "nodes": nodes,
        "output": {"dir": cfg.out_dir, "weights": cfg.log_weights, "probes": cfg.probes},
    }


def _write(path: Path, writer) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer(fh)
    except OSError as exc:
        raise EmitError(f"{path}: {exc.strerror or exc}") from exc


def summary_dict(result: RunResult) -> dict:
    theory_db = result.theory.msd_av_db
    policies = {}
    for name in result.policies:
        ss_db = result.steady_state_db(name)
        entry = {
            "steady_state_sd": result.steady_state[name],
            "steady_state_sd_db": ss_db,
            "steady_state_stderr": result.steady_state_se[name],
            "gap_to_theory_db": ss_db - theory_db,
            "negative_weights": result.negative_weights[name],
            "fallback_solves": result.fallback_solves[name],
        }
        if name in result.weight_deviation:
            entry["weight_deviation_from_a_inf"] = result.weight_deviation[name]
        if name in result.diagnostics:
            entry["diagnostics"] = result.diagnostics[name]
        policies[name] = entry
    return {
        "n_iters": result.n_iters,
        "n_runs": result.n_runs,
        "tail_window": result.tail_window,
        "theory": result.theory.to_dict(),
        "policies": policies,
    }


def emit_results(
    result: RunResult,
    out_dir,
    *,
    config: ExperimentConfig | None = None,
    weights: bool = False,
) -> dict[str, Path]:
    """Write curves.csv, summary.json, manifest.json and optionally weights.csv."""
    if not result.policies:
        raise EmitError("no policies in result; nothing written")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise EmitError(f"{out}: {exc.strerror or exc}") from exc
    paths = {"curves": out / "curves.csv", "summary": out / "summary.json", "manifest": out / "manifest.json"}

    def write_curves(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for name in result.policies:
            curve = result.curves[name]
            curve_db = to_db(curve)
            for i in range(curve.size):
                w.writerow((i, name, fmt(curve[i]), fmt(curve_db[i])))

    _write(paths["curves"], write_curves)
    _write(paths["summary"], lambda fh: json.dump(summary_dict(result), fh, indent=2, sort_keys=True))

    if weights and result.weights_mean:
        paths["weights"] = out / "weights.csv"

        def write_weights(fh):
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("policy", "iteration", "k", "l", "a_lk"))
            for name in result.policies:
                traj = result.weights_mean.get(name)
                if traj is None:
                    continue
                ls, ks = np.nonzero(np.any(traj != 0, axis=0))
                for i in range(traj.shape[0]):
                    for l, k in zip(ls, ks):
                        w.writerow((name, i, k, l, fmt(traj[i, l, k])))

        _write(paths["weights"], write_weights)

    manifest = {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "config": config_to_dict(config) if config is not None else None,
        **result.metadata,
    }
    _write(paths["manifest"], lambda fh: json.dump(manifest, fh, indent=2, sort_keys=True))
    return paths


def read_curves(path) -> dict[str, np.ndarray]:
    """Load curves.csv back into per-policy linear SD arrays."""
    rows: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.setdefault(row["policy"], []).append((int(row["iteration"]), float(row["sd_linear"])))
    return {k: np.array([v for _, v in sorted(vals)]) for k, vals in rows.items()}


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    for flag, key in (("runs", "n_runs"), ("seed", "master_seed"), ("iters", "n_iters"), ("workers", "workers"), ("out", "out_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    if getattr(args, "weights", False):
        changes["log_weights"] = True
    return dataclasses.replace(cfg, **changes).validate() if changes else cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptive-diffusion",
        description="Diffusion adaptation with static and Gramian-based adaptive combination policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the Monte Carlo experiment and write result files")
    sim.add_argument("--config", required=True)
    sim.add_argument("--runs", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--iters", type=int)
    sim.add_argument("--workers", type=int)
    sim.add_argument("--out")
    sim.add_argument("--weights", action="store_true", help="also log and write weight trajectories")
    sim.add_argument("--quiet", action="store_true")

    th = sub.add_parser("theory", help="print the steady-state prediction as JSON")
    th.add_argument("--config", required=True)

    pt = sub.add_parser("policy-table", help="print every static policy's combination matrix")
    pt.add_argument("--config", required=True)
    return parser


def _cmd_simulate(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    setup = prepare_experiment(cfg)
    result = run_experiment(cfg, setup, progress=log)
    paths = emit_results(result, cfg.out_dir, config=cfg, weights=cfg.log_weights)
    summary = summary_dict(result)
    log(f"theory MSD: {summary['theory']['msd_av_db']:.2f} dB")
    for name, entry in summary["policies"].items():
        log(f"{name:>18}: steady state {entry['steady_state_sd_db']:.2f} dB (gap {entry['gap_to_theory_db']:+.2f} dB)")
    log(f"wrote {', '.join(str(p) for p in paths.values())}")
    return 0


def _cmd_theory(args) -> int:
    cfg = parse_config(args.config)
    setup = prepare_experiment(cfg)
    print(json.dumps(setup.prediction.to_dict(), indent=2))
    return 0


def _cmd_policy_table(args) -> int:
    cfg = parse_config(args.config)
    setup = prepare_experiment(cfg)
    with np.printoptions(precision=4, suppress=True, linewidth=200):
        for rule in STATIC_POLICIES:
            a = static_policy(rule, setup.topology, setup.prediction.theta)
            print(f"# {rule}")
            print(a)
            print()
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"simulate": _cmd_simulate, "theory": _cmd_theory, "policy-table": _cmd_policy_table}
    try:
        return handlers[args.command](args)
    except (ConfigError, TopologyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationError as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (SimulationError, TheoryError, PolicyError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
