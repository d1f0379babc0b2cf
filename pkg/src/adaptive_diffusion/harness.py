"""Monte Carlo experiment orchestration."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .combiners import ADAPTIVE_POLICIES, POLICY_NAMES
from .diffusion import PolicySpec, SimulationTrace, simulate
from .model import (
    GroundTruth,
    LogisticNodeModel,
    NodeStatistics,
    calibrate_common_minimizer,
    draw_node_parameters,
    estimate_node_statistics,
)
from .network import Topology, generate_topology
from .theory import SteadyStatePrediction, predict_steady_state, to_db

__all__ = [
    "ConfigError",
    "TopologyConfig",
    "NodeConfig",
    "ExperimentConfig",
    "ExperimentSetup",
    "RunResult",
    "derive_seed",
    "prepare_experiment",
    "run_experiment",
    "steady_state_estimate",
    "weight_convergence_report",
]

# Sub-stream identifiers under the master seed.
TOPOLOGY_STREAM = 1
PARAMETER_STREAM = 2
CALIBRATION_STREAM = 3
STATISTICS_STREAM = 5


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


def derive_seed(master_seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class TopologyConfig:
    model: str = "random"
    n_nodes: int = 20
    p: float = 0.25
    seed: int | None = None
    adjacency: str | None = None

    def build(self, master_seed: int) -> Topology:
        if self.adjacency is not None:
            t = Topology.from_adjacency_text(self.adjacency)
            if t.n_nodes != self.n_nodes:
                raise ConfigError(
                    f"topology.adjacency lists {t.n_nodes} nodes but n_nodes = {self.n_nodes}"
                )
            return t
        seed = self.seed if self.seed is not None else derive_seed(master_seed, TOPOLOGY_STREAM)
        return generate_topology(self.n_nodes, self.model, seed=seed, p=self.p)


@dataclass(frozen=True)
class NodeConfig:
    dim: int = 10
    step: float | tuple[float, ...] = 0.005
    target_reg: float = 0.5
    mean_range: tuple[float, float] = (0.6, 1.4)
    var_range: tuple[float, float] = (1e-2, 1.0)
    mean_scale: tuple[float, ...] | None = None
    var: tuple[float, ...] | None = None
    param_seed: int | None = None
    calibration_method: str = "quadrature"
    calibration_samples: int = 10**6
    calibration_tol: float = 1e-3
    statistics_samples: int = 10**5


@dataclass(frozen=True)
class ExperimentConfig:
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    nodes: NodeConfig = field(default_factory=NodeConfig)
    policies: tuple[PolicySpec, ...] = ()
    n_iters: int = 5000
    n_runs: int = 400
    master_seed: int = 0
    tail_window: float = 0.1
    workers: int = 1
    batch_size: int = 25
    log_weights: bool = False
    probes: bool = False
    out_dir: str = "results"

    def validate(self) -> "ExperimentConfig":
        if self.n_runs < 1:
            raise ConfigError(f"n_runs: must be >= 1, got {self.n_runs}")
        if self.n_iters < 1:
            raise ConfigError(f"n_iters: must be >= 1, got {self.n_iters}")
        if not 0.0 < self.tail_window <= 1.0:
            raise ConfigError(f"tail_window: must satisfy 0 < tail_window <= 1, got {self.tail_window}")
        if self.workers < 1:
            raise ConfigError(f"workers: must be >= 1, got {self.workers}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if not self.policies:
            raise ConfigError("policies: at least one policy is required")
        seen = set()
        for j, pol in enumerate(self.policies):
            if pol.name not in POLICY_NAMES:
                raise ConfigError(
                    f"policies[{j}].name: unknown policy {pol.name!r}; expected one of {POLICY_NAMES}"
                )
            if pol.name in seen:
                raise ConfigError(f"policies[{j}].name: duplicate policy {pol.name!r}")
            seen.add(pol.name)
            for attr in ("alpha1", "alpha2"):
                val = getattr(pol, attr)
                if not 0.0 < val <= 1.0:
                    raise ConfigError(f"policies[{j}].{attr}: must satisfy 0 < {attr} <= 1, got {val}")
        top = self.topology
        if top.n_nodes < 1:
            raise ConfigError(f"topology.n_nodes: must be >= 1, got {top.n_nodes}")
        if top.adjacency is None and top.model not in ("ring", "complete", "random"):
            raise ConfigError(f"topology.model: unknown model {top.model!r}")
        if top.model == "random" and top.adjacency is None and not 0.0 < top.p <= 1.0:
            raise ConfigError(f"topology.p: must satisfy 0 < p <= 1, got {top.p}")
        nodes = self.nodes
        n = top.n_nodes
        if nodes.dim < 1:
            raise ConfigError(f"nodes.dim: must be >= 1, got {nodes.dim}")
        steps = np.atleast_1d(np.asarray(nodes.step, dtype=float))
        if steps.size not in (1, n):
            raise ConfigError(f"nodes.step: expected a scalar or {n} values, got {steps.size}")
        if np.any(steps <= 0):
            raise ConfigError("nodes.step: step sizes must be positive")
        if not nodes.target_reg > 0:
            raise ConfigError(f"nodes.target_reg: must be positive, got {nodes.target_reg}")
        for name in ("mean_scale", "var"):
            vals = getattr(nodes, name)
            if vals is not None and len(vals) != n:
                raise ConfigError(f"nodes.{name}: expected {n} values, got {len(vals)}")
        if nodes.var is not None and min(nodes.var) <= 0:
            raise ConfigError("nodes.var: variances must be positive")
        lo, hi = nodes.var_range
        if not 0 < lo <= hi:
            raise ConfigError(f"nodes.var_range: need 0 < low <= high, got {nodes.var_range}")
        if nodes.mean_range[0] > nodes.mean_range[1]:
            raise ConfigError(f"nodes.mean_range: low exceeds high in {nodes.mean_range}")
        if nodes.calibration_method not in ("quadrature", "monte_carlo"):
            raise ConfigError(f"nodes.calibration_method: unknown method {nodes.calibration_method!r}")
        if nodes.statistics_samples < 1000:
            raise ConfigError("nodes.statistics_samples: must be >= 1000")
        if nodes.calibration_samples < 1:
            raise ConfigError("nodes.calibration_samples: must be >= 1")
        if not nodes.calibration_tol > 0:
            raise ConfigError("nodes.calibration_tol: must be positive")
        return self


@dataclass
class ExperimentSetup:
    """Everything fixed before simulation: graph, calibrated nodes, statistics, theory."""

    topology: Topology
    models: list[LogisticNodeModel]
    ground_truth: GroundTruth
    statistics: list[NodeStatistics]
    prediction: SteadyStatePrediction

    @property
    def steps(self) -> np.ndarray:
        return np.array([m.step for m in self.models])

    @property
    def noise_powers(self) -> np.ndarray:
        return np.array([s.noise_power for s in self.statistics])


def prepare_experiment(cfg: ExperimentConfig) -> ExperimentSetup:
    """Build the topology, draw node parameters, calibrate and estimate statistics.

    Node parameters are drawn once from their own sub-seed and shared by
    every policy and replication.
    """
    cfg.validate()
    topology = cfg.topology.build(cfg.master_seed)
    n = topology.n_nodes
    nodes = cfg.nodes
    param_seed = nodes.param_seed
    if param_seed is None:
        param_seed = derive_seed(cfg.master_seed, PARAMETER_STREAM)
    means, variances = draw_node_parameters(
        n, np.random.default_rng(param_seed), nodes.mean_range, nodes.var_range
    )
    if nodes.mean_scale is not None:
        means = np.asarray(nodes.mean_scale, dtype=float)
    if nodes.var is not None:
        variances = np.asarray(nodes.var, dtype=float)
    steps = np.broadcast_to(np.asarray(nodes.step, dtype=float), (n,))
    models = [
        LogisticNodeModel(nodes.dim, float(mh), float(vh), nodes.target_reg, float(st))
        for mh, vh, st in zip(means, variances, steps)
    ]
    truth, models = calibrate_common_minimizer(
        models,
        nodes.target_reg,
        tol=nodes.calibration_tol,
        seed=derive_seed(cfg.master_seed, CALIBRATION_STREAM),
        method=nodes.calibration_method,
        n_samples=nodes.calibration_samples,
    )
    stats = [
        estimate_node_statistics(
            m, truth.w_star, nodes.statistics_samples, seed=derive_seed(cfg.master_seed, STATISTICS_STREAM, k)
        )
        for k, m in enumerate(models)
    ]
    prediction = predict_steady_state(
        topology,
        [m.step for m in models],
        [s.hessian_at_opt for s in stats],
        [s.noise_cov for s in stats],
    )
    return ExperimentSetup(topology, models, truth, stats, prediction)


def steady_state_estimate(curve, window: float = 0.1) -> float:
    """Mean of the final ceil(window * len(curve)) samples."""
    curve = np.asarray(curve, dtype=float)
    if not 0.0 < window <= 1.0:
        raise ValueError(f"window must satisfy 0 < window <= 1, got {window}")
    count = math.ceil(window * curve.size)
    if count < 1 or count > curve.size:
        raise ValueError(f"window of {count} samples does not fit a curve of length {curve.size}")
    return float(np.mean(curve[-count:]))


def _tail_count(n_iters: int, window: float) -> int:
    return max(1, math.ceil(window * n_iters))


def weight_convergence_report(trajectory, a_inf, tail_window: float = 0.1) -> float:
    """Max |mean of A_i over the tail - A_inf| over the support of A_inf.

    ``trajectory`` has shape (T, N, N).
    """
    traj = np.asarray(trajectory, dtype=float)
    if traj.ndim != 3 or traj.shape[0] == 0:
        raise ValueError("weight trajectory is empty")
    a_inf = np.asarray(a_inf, dtype=float)
    tail = traj[-_tail_count(traj.shape[0], tail_window):].mean(axis=0)
    support = (a_inf != 0) | (tail != 0)
    return float(np.abs(tail - a_inf)[support].max())


@dataclass
class RunResult:
    policies: tuple[str, ...]
    n_iters: int
    n_runs: int
    tail_window: float
    curves: dict[str, np.ndarray]
    per_run_sd: dict[str, np.ndarray]
    steady_state: dict[str, float]
    steady_state_se: dict[str, float]
    theory: SteadyStatePrediction
    negative_weights: dict[str, int]
    fallback_solves: dict[str, int]
    weights_mean: dict[str, np.ndarray] = field(default_factory=dict)
    weight_deviation: dict[str, float] = field(default_factory=dict)
    q_tail_mean: dict[str, np.ndarray] = field(default_factory=dict)
    diagnostics: dict[str, dict] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def curve_db(self, policy: str) -> np.ndarray:
        return to_db(self.curves[policy])

    def steady_state_db(self, policy: str) -> float:
        return to_db(self.steady_state[policy])


def _run_chunk(args) -> SimulationTrace:
    topology, models, w_star, policy, n_iters, seed, reps, theta, log_weights, tail_start = args
    return simulate(
        topology,
        models,
        w_star,
        policy,
        n_iters,
        seed,
        reps,
        theta=theta,
        log_weights=log_weights,
        tail_start=tail_start,
    )


def _chunks(n_runs: int, size: int) -> list[tuple[int, ...]]:
    return [tuple(range(s, min(s + size, n_runs))) for s in range(0, n_runs, size)]


def run_experiment(
    cfg: ExperimentConfig,
    setup: ExperimentSetup | None = None,
    progress: Callable[[str], None] | None = None,
) -> RunResult:
    """Run every policy over ``n_runs`` paired replications.

    Replication r of every policy consumes the same data streams.  Work is
    split into fixed-size batches of replications, executed serially or on
    ``cfg.workers`` processes, and reduced in replication order, so results
    do not depend on the worker count.
    """
    cfg.validate()
    if setup is None:
        setup = prepare_experiment(cfg)
    pred = setup.prediction
    n_tail = _tail_count(cfg.n_iters, cfg.tail_window)
    tail_start = cfg.n_iters - n_tail
    chunks = _chunks(cfg.n_runs, cfg.batch_size)

    result = RunResult(
        policies=tuple(p.name for p in cfg.policies),
        n_iters=cfg.n_iters,
        n_runs=cfg.n_runs,
        tail_window=cfg.tail_window,
        curves={},
        per_run_sd={},
        steady_state={},
        steady_state_se={},
        theory=pred,
        negative_weights={},
        fallback_solves={},
    )

    pool = ProcessPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for policy in cfg.policies:
            if progress:
                progress(f"policy {policy.name}: {cfg.n_runs} runs x {cfg.n_iters} iterations")
            jobs = [
                (
                    setup.topology,
                    setup.models,
                    setup.ground_truth.w_star,
                    policy,
                    cfg.n_iters,
                    cfg.master_seed,
                    reps,
                    pred.theta,
                    cfg.log_weights,
                    tail_start,
                )
                for reps in chunks
            ]
            traces = list(pool.map(_run_chunk, jobs)) if pool else [_run_chunk(j) for j in jobs]
            _reduce(result, policy, traces, cfg, setup, n_tail)
    finally:
        if pool is not None:
            pool.shutdown()

    truth = setup.ground_truth
    result.metadata = {
        "master_seed": cfg.master_seed,
        "w_star": truth.w_star.tolist(),
        "regularizers": truth.regs.tolist(),
        "calibration_residuals": truth.grad_residuals.tolist(),
        "mean_scale": [m.mean_scale for m in setup.models],
        "feature_var": [m.var for m in setup.models],
        "step": [m.step for m in setup.models],
        "noise_power": setup.noise_powers.tolist(),
        "adjacency": setup.topology.to_adjacency_text(),
    }
    return result


def _reduce(result: RunResult, policy: PolicySpec, traces, cfg, setup, n_tail) -> None:
    name = policy.name
    sd = np.concatenate([tr.sd for tr in traces], axis=0)
    tail_means = sd[:, -n_tail:].mean(axis=1)
    result.per_run_sd[name] = sd
    result.curves[name] = sd.mean(axis=0)
    result.steady_state[name] = steady_state_estimate(result.curves[name], cfg.tail_window)
    result.steady_state_se[name] = (
        float(tail_means.std(ddof=1) / math.sqrt(sd.shape[0])) if sd.shape[0] > 1 else float("nan")
    )
    result.negative_weights[name] = int(sum(int(tr.negative_weights.sum()) for tr in traces))
    result.fallback_solves[name] = int(sum(int(tr.fallback_solves.sum()) for tr in traces))

    if cfg.log_weights:
        total = traces[0].weights_sum.copy()
        for tr in traces[1:]:
            total += tr.weights_sum
        mean_traj = total / cfg.n_runs
        result.weights_mean[name] = mean_traj
        result.weight_deviation[name] = weight_convergence_report(
            mean_traj, setup.prediction.a_inf, cfg.tail_window
        )

    if name in ADAPTIVE_POLICIES and traces[0].q_tail_sum is not None:
        q_sum = np.concatenate([tr.q_tail_sum for tr in traces], axis=0).sum(axis=0)
        result.q_tail_mean[name] = q_sum / (cfg.n_runs * traces[0].tail_count)

    if cfg.probes:
        diag = {}
        lag = [tr.psi_lag_corr for tr in traces if tr.psi_lag_corr is not None]
        if lag:
            diag["psi_lag1_correlation"] = np.concatenate(lag, axis=0).mean(axis=0).tolist()
        if cfg.log_weights:
            tail = result.weights_mean[name][-n_tail:]
            half = tail.shape[0] // 2
            if half >= 1:
                drift = np.abs(tail[:half].mean(axis=0) - tail[half:].mean(axis=0)).max()
                diag["weight_mean_drift"] = float(drift)
        result.diagnostics[name] = diag
