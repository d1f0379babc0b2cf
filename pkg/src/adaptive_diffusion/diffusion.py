"""Adapt-then-combine diffusion and the network square-deviation metric.

The simulation loop is vectorized over a batch of independent replications.
Every (replication, node) pair owns its own random stream, derived from the
master seed by a counter-style spawn key, so a replication's trajectory does
not depend on which batch or worker it runs in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .combiners import (
    ADAPTIVE_POLICIES,
    STATIC_POLICIES,
    PolicyError,
    diagonal_weight_matrix,
    solve_kkt_batch,
    static_policy,
)
from .model import LogisticNodeModel, QuadraticNodeModel, data_from_normals, sample_datum
from .network import Topology

__all__ = [
    "PolicySpec",
    "NetworkState",
    "SimulationError",
    "SimulationTrace",
    "Replication",
    "node_stream",
    "adapt_step",
    "combine_step",
    "network_sd",
    "simulate",
    "run_replication",
]

DATA_STREAM = 4
CHUNK = 256


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicySpec:
    """Policy name plus the EMA constants used by the adaptive rules."""

    name: str
    alpha1: float = 0.01
    alpha2: float = 0.03

    @property
    def adaptive(self) -> bool:
        return self.name in ADAPTIVE_POLICIES


@dataclass
class NetworkState:
    iterates: np.ndarray
    intermediates: np.ndarray
    iteration: int = 0

    @classmethod
    def initial(cls, n_nodes: int, dim: int) -> "NetworkState":
        return cls(np.zeros((n_nodes, dim)), np.zeros((n_nodes, dim)), 0)


def node_stream(seed: int, replication: int, node: int) -> np.random.Generator:
    """Independent data stream of one node in one replication."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(DATA_STREAM, replication, node))
    return np.random.Generator(np.random.PCG64(ss))


class _NodeArrays:
    """Per-node model parameters stacked for vectorized evaluation."""

    def __init__(self, models: Sequence):
        if not models:
            raise SimulationError("no node models")
        kinds = {type(m) for m in models}
        if len(kinds) != 1:
            raise SimulationError("all nodes must share one model type")
        self.kind = kinds.pop()
        self.dim = models[0].dim
        if any(m.dim != self.dim for m in models):
            raise SimulationError("all nodes must share one dimension")
        self.step = np.array([m.step for m in models], dtype=float)
        if self.kind is LogisticNodeModel:
            self.mean_scale = np.array([m.mean_scale for m in models])
            self.std = np.array([m.std for m in models])
            self.reg = np.array([m.reg for m in models])
        elif self.kind is QuadraticNodeModel:
            self.target = np.stack([m.target for m in models])
            self.noise_std = np.array([m.noise_std for m in models])
        else:
            raise SimulationError(f"unsupported model type {self.kind.__name__}")

    def data(self, z: np.ndarray):
        """Map normals of shape (..., N, M + 1) to per-node data."""
        if self.kind is QuadraticNodeModel:
            return None, self.noise_std[:, None] * z[..., 1:]
        return data_from_normals(z, self.mean_scale, self.std)

    def gradient(self, w: np.ndarray, labels, h) -> np.ndarray:
        if self.kind is QuadraticNodeModel:
            return w - self.target + h
        margin = labels * np.einsum("...m,...m->...", h, w)
        return (-labels * expit(-margin))[..., None] * h + self.reg[:, None] * w


def adapt_step(state: NetworkState, models: Sequence, rng: np.random.Generator, data=None):
    """psi_k = w_k - mu_k * stochastic gradient, one fresh datum per node.

    ``data`` (a list of per-node ``(label, vector)`` pairs) overrides drawing
    from ``rng``.  Stores and returns the intermediates.
    """
    nodes = _NodeArrays(models)
    if data is None:
        data = [sample_datum(m, rng) for m in models]
    labels = np.array([d[0] for d in data], dtype=float)
    h = np.stack([np.asarray(d[1], dtype=float) for d in data])
    w = state.iterates
    psi = w - nodes.step[:, None] * nodes.gradient(w, labels, h)
    state.intermediates = psi
    return psi


def combine_step(psi, a) -> np.ndarray:
    """w_k = sum_l a_lk psi_l for every node k."""
    psi = np.asarray(psi, dtype=float)
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape != (psi.shape[0], psi.shape[0]):
        raise SimulationError(
            f"combination matrix shape {a.shape} does not match {psi.shape[0]} nodes"
        )
    return a.T @ psi


def network_sd(state: NetworkState | np.ndarray, w_star) -> float:
    """(1/N) sum_k ||w° - w_k||^2."""
    w = state.iterates if isinstance(state, NetworkState) else np.asarray(state)
    return float(np.mean(np.sum((np.asarray(w_star) - w) ** 2, axis=-1)))


@dataclass
class SimulationTrace:
    """Raw output of :func:`simulate` for a batch of replications.

    ``weights_sum`` is the per-iteration sum of A_i over the batch; tail
    accumulators cover iterations ``>= tail_start``.
    """

    replications: tuple[int, ...]
    sd: np.ndarray
    negative_weights: np.ndarray
    fallback_solves: np.ndarray
    weights_sum: np.ndarray | None = None
    q_tail_sum: np.ndarray | None = None
    psi_lag_corr: np.ndarray | None = None
    tail_count: int = 0


class Replication(NamedTuple):
    sd: np.ndarray
    weights: np.ndarray | None


def _draw_chunk(streams, n_nodes: int, n_steps: int, width: int) -> np.ndarray:
    z = np.empty((n_steps, len(streams), n_nodes, width))
    for r, row in enumerate(streams):
        for k, g in enumerate(row):
            z[:, r, k, :] = g.standard_normal((n_steps, width))
    return z


def _degree_groups(t: Topology):
    groups = {}
    for k, nbrs in enumerate(t.neighborhoods):
        groups.setdefault(len(nbrs), []).append(k)
    out = []
    for n, ks in sorted(groups.items()):
        ks = np.array(ks)
        idx = np.array([t.neighborhoods[k] for k in ks])
        out.append((ks, idx))
    return out


def simulate(
    topology: Topology,
    models: Sequence,
    w_star,
    policy: PolicySpec | str,
    n_iters: int,
    seed: int,
    replications: Sequence[int] = (0,),
    *,
    theta=None,
    log_weights: bool = False,
    tail_start: int | None = None,
) -> SimulationTrace:
    """Run ATC diffusion for a batch of replications.

    Static policies use a fixed matrix (``relative-variance`` needs
    ``theta``).  Adaptive policies follow the Gramian recursion: adapt all
    nodes, form each neighbourhood's deviation Gramian against the previous
    mean estimate, update the Gramian EMA, then the mean EMA, solve each
    node's KKT system and combine.

    The Gramian and mean EMAs are kept network-wide: node k's state is the
    restriction of the N x N Gramian (and of the N mean estimates) to N_k,
    which is the same recursion as running one state per node.
    """
    if isinstance(policy, str):
        policy = PolicySpec(policy)
    if n_iters < 0:
        raise SimulationError("n_iters must be nonnegative")
    nodes = _NodeArrays(models)
    n, m = topology.n_nodes, nodes.dim
    if len(models) != n:
        raise SimulationError(f"{len(models)} models for {n} nodes")
    w_star = np.asarray(w_star, dtype=float)
    reps = tuple(int(r) for r in replications)
    n_rep = len(reps)

    if policy.name in STATIC_POLICIES:
        a_static = static_policy(policy.name, topology, theta)
    elif policy.name not in ADAPTIVE_POLICIES:
        raise PolicyError(f"unknown policy {policy.name!r}")
    a1, a2 = policy.alpha1, policy.alpha2

    w = np.zeros((n_rep, n, m))
    sd = np.empty((n_rep, n_iters))
    negatives = np.zeros(n_rep, dtype=np.int64)
    fallbacks = np.zeros(n_rep, dtype=np.int64)
    weights_sum = np.zeros((n_iters, n, n)) if log_weights else None

    if policy.name == "gramian":
        q_hat = np.broadcast_to(np.eye(n), (n_rep, n, n)).copy()
        groups = _degree_groups(topology)
    elif policy.name == "gramian-diag":
        q_diag = np.ones((n_rep, n))
    psi_bar = np.zeros((n_rep, n, m))

    track_tail = tail_start is not None and tail_start < n_iters
    if track_tail:
        q_tail = np.zeros((n_rep, n, n)) if policy.name == "gramian" else np.zeros((n_rep, n))
        s_psi = np.zeros((n_rep, n, m))
        s_prev = np.zeros((n_rep, n, m))
        s_sq = np.zeros((n_rep, n))
        s_prev_sq = np.zeros((n_rep, n))
        s_lag = np.zeros((n_rep, n))
        psi_prev = None

    streams = [[node_stream(seed, r, k) for k in range(n)] for r in reps]
    z = None
    for i in range(n_iters):
        j = i % CHUNK
        if j == 0:
            z = _draw_chunk(streams, n, min(CHUNK, n_iters - i), m + 1)
        try:
            labels, h = nodes.data(z[j])
            psi = w - nodes.step[:, None] * nodes.gradient(w, labels, h)

            if policy.name == "gramian":
                dev = psi - psi_bar
                q_hat = (1.0 - a1) * q_hat + a1 * (dev @ np.swapaxes(dev, 1, 2))
                psi_bar = (1.0 - a2) * psi_bar + a2 * psi
                a = np.zeros((n_rep, n, n))
                for ks, idx in groups:
                    sub = q_hat[:, idx[:, :, None], idx[:, None, :]]
                    nk = idx.shape[1]
                    c, _, fb = solve_kkt_batch(sub.reshape(-1, nk, nk))
                    a[:, idx, ks[:, None]] = c.reshape(n_rep, len(ks), nk)
                    fallbacks += fb.reshape(n_rep, len(ks)).sum(axis=1)
            elif policy.name == "gramian-diag":
                dev = psi - psi_bar
                q_diag = (1.0 - a1) * q_diag + a1 * np.einsum("rkm,rkm->rk", dev, dev)
                psi_bar = (1.0 - a2) * psi_bar + a2 * psi
                a = diagonal_weight_matrix(q_diag, topology)
            else:
                a = a_static

            if a.ndim == 2:
                w = np.einsum("lk,rlm->rkm", a, psi)
            else:
                w = np.swapaxes(a, 1, 2) @ psi
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            raise SimulationError(f"iteration {i}: {exc}") from exc

        sd[:, i] = np.mean(np.sum((w - w_star) ** 2, axis=-1), axis=-1)
        if a.ndim == 2:
            negatives += int(np.count_nonzero(a < 0))
        else:
            negatives += np.count_nonzero(a < 0, axis=(1, 2))
        if log_weights:
            weights_sum[i] = a * n_rep if a.ndim == 2 else a.sum(axis=0)

        if track_tail and i >= tail_start:
            if policy.name == "gramian":
                q_tail += q_hat
            elif policy.name == "gramian-diag":
                q_tail += q_diag
            if psi_prev is not None:
                s_psi += psi
                s_prev += psi_prev
                s_sq += np.einsum("rkm,rkm->rk", psi, psi)
                s_prev_sq += np.einsum("rkm,rkm->rk", psi_prev, psi_prev)
                s_lag += np.einsum("rkm,rkm->rk", psi, psi_prev)
            psi_prev = psi

    trace = SimulationTrace(
        replications=reps,
        sd=sd,
        negative_weights=negatives,
        fallback_solves=fallbacks,
        weights_sum=weights_sum,
    )
    if track_tail:
        count = n_iters - tail_start
        trace.tail_count = count
        if policy.adaptive:
            trace.q_tail_sum = q_tail
        pairs = count - 1
        if pairs > 1:
            mean = s_psi / pairs
            mean_prev = s_prev / pairs
            var = s_sq / pairs - np.einsum("rkm,rkm->rk", mean, mean)
            var_prev = s_prev_sq / pairs - np.einsum("rkm,rkm->rk", mean_prev, mean_prev)
            cov = s_lag / pairs - np.einsum("rkm,rkm->rk", mean, mean_prev)
            scale = np.sqrt(np.maximum(var, 0.0) * np.maximum(var_prev, 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                trace.psi_lag_corr = np.where(scale > 0, cov / scale, 0.0)
    return trace


def run_replication(
    topology: Topology,
    models: Sequence,
    ground_truth,
    policy: PolicySpec | str,
    n_iters: int,
    seed: int,
    *,
    replication: int = 0,
    theta=None,
    log_weights: bool = False,
) -> Replication:
    """Single replication; ``ground_truth`` may be a GroundTruth or w° itself."""
    w_star = getattr(ground_truth, "w_star", ground_truth)
    trace = simulate(
        topology,
        models,
        w_star,
        policy,
        n_iters,
        seed,
        (replication,),
        theta=theta,
        log_weights=log_weights,
    )
    return Replication(sd=trace.sd[0], weights=trace.weights_sum)
