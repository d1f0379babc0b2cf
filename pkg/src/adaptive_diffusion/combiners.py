"""Combination-weight policies.

Column k of a combination matrix A holds the weights node k assigns to the
intermediate estimates of its neighbours: it sums to one and vanishes
outside N_k.  Entries may be negative; nothing here clamps them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .network import Topology

__all__ = [
    "STATIC_POLICIES",
    "ADAPTIVE_POLICIES",
    "POLICY_NAMES",
    "PolicyError",
    "KKTSolution",
    "GramianCombinerState",
    "DiagonalCombinerState",
    "static_policy",
    "normalized_columns",
    "validate_combination_matrix",
    "solve_kkt",
    "solve_kkt_batch",
    "gramian_update",
    "adaptive_weights_full",
    "diagonal_weight_matrix",
    "diagonal_update_and_weights",
]

STATIC_POLICIES = ("uniform", "metropolis", "max-degree", "relative-variance")
ADAPTIVE_POLICIES = ("gramian", "gramian-diag")
POLICY_NAMES = STATIC_POLICIES + ADAPTIVE_POLICIES

# Below this a diagonal Gramian entry is treated as underflowed.
DIAG_EPS = 1e-30


class PolicyError(ValueError):
    pass


def validate_combination_matrix(a: np.ndarray, t: Topology, atol: float = 1e-12) -> None:
    """Raise PolicyError unless columns sum to one and respect the support."""
    a = np.asarray(a)
    if a.shape[-2:] != (t.n_nodes, t.n_nodes):
        raise PolicyError(f"combination matrix has shape {a.shape}")
    if np.any(a[..., ~t.adjacency] != 0.0):
        raise PolicyError("combination matrix has weight outside a neighbourhood")
    err = np.abs(a.sum(axis=-2) - 1.0).max()
    if err > atol:
        raise PolicyError(f"column sums deviate from one by {err:.3e}")


def normalized_columns(t: Topology, weights) -> np.ndarray:
    """a_lk = weights_l / sum_{m in N_k} weights_m on N_k, zero elsewhere.

    ``weights`` may carry leading batch axes (shape ``(..., N)``).
    """
    weights = np.asarray(weights, dtype=float)
    masked = np.where(t.adjacency, weights[..., :, None], 0.0)
    return masked / masked.sum(axis=-2, keepdims=True)


def _metropolis(t: Topology) -> np.ndarray:
    n = t.degrees.astype(float)
    a = np.where(t.adjacency, 1.0 / np.maximum(n[:, None], n[None, :]), 0.0)
    np.fill_diagonal(a, 0.0)
    np.fill_diagonal(a, 1.0 - a.sum(axis=0))
    return a


def _max_degree(t: Topology) -> np.ndarray:
    a = np.where(t.adjacency, 1.0 / t.degrees.max(), 0.0)
    np.fill_diagonal(a, 0.0)
    np.fill_diagonal(a, 1.0 - a.sum(axis=0))
    return a


def static_policy(rule: str, t: Topology, theta=None) -> np.ndarray:
    """Combination matrix of a static rule.

    ``rule`` is one of ``uniform``, ``metropolis``, ``max-degree`` or
    ``relative-variance``; the last needs strictly positive per-node
    ``theta`` (typically 1 / (mu_k^2 sigma_{s,k}^2)).
    """
    rule = rule.replace("_", "-")
    if rule == "uniform":
        return normalized_columns(t, np.ones(t.n_nodes))
    if rule == "metropolis":
        return _metropolis(t)
    if rule == "max-degree":
        return _max_degree(t)
    if rule == "relative-variance":
        if theta is None:
            raise PolicyError("relative-variance rule needs per-node theta")
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (t.n_nodes,):
            raise PolicyError(f"theta must have length {t.n_nodes}, got {theta.shape}")
        if not np.all(theta > 0):
            raise PolicyError("relative-variance theta must be strictly positive")
        return normalized_columns(t, theta)
    raise PolicyError(f"unknown static rule {rule!r}")


class KKTSolution(NamedTuple):
    c: np.ndarray
    multiplier: float
    fallback: bool


def _kkt_residual_ok(q, c, lam) -> np.ndarray:
    resid = np.linalg.norm(np.einsum("bij,bj->bi", q, c) + lam[:, None], axis=1)
    scale = 1.0 + np.linalg.norm(q, axis=(1, 2))
    return np.isfinite(resid) & (resid <= 1e-8 * scale)


def _singular_solve(q, kkt, rhs, top) -> np.ndarray:
    """Minimum-norm optimum when q is numerically singular.

    If the null space of q is not orthogonal to 1, the optimum has zero
    objective and the minimum-norm such c lies in that null space; solving
    there directly avoids the ill-conditioned bordered system.
    """
    vals, vecs = np.linalg.eigh(q)
    null = vecs[:, vals <= 1e-12 * top]
    t = null.sum(axis=0)
    if null.shape[1] and np.linalg.norm(t) > 1e-8:
        out = np.zeros(q.shape[0] + 1)
        out[:-1] = null @ (t / (t @ t))
        return out
    return np.linalg.lstsq(kkt, rhs, rcond=1e-10)[0]


def solve_kkt_batch(q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve min c^T q c s.t. 1^T c = 1 for a stack of PSD matrices.

    Returns ``(c, multiplier, fallback)`` with shapes ``(B, n)``, ``(B,)``,
    ``(B,)``.  The bordered KKT system is factorized directly; matrices whose
    ``q`` is numerically singular, or whose direct solve leaves a large
    residual, are re-solved by a rank-revealing least-squares solve, which
    picks the minimum-norm optimum.  Each matrix is scaled to unit trace
    first, so the weights do not depend on its overall scale.
    """
    q = np.asarray(q, dtype=float)
    q = 0.5 * (q + np.swapaxes(q, -1, -2))
    b, n = q.shape[0], q.shape[-1]
    scale = np.trace(q, axis1=-2, axis2=-1)
    scale = np.where(scale > 0, scale, 1.0)
    q = q / scale[:, None, None]
    kkt = np.zeros((b, n + 1, n + 1))
    kkt[:, :n, :n] = q
    kkt[:, :n, n] = 1.0
    kkt[:, n, :n] = 1.0
    rhs = np.zeros((b, n + 1))
    rhs[:, n] = 1.0

    eig = np.linalg.eigvalsh(q)
    top = np.maximum(np.abs(eig).max(axis=1), np.finfo(float).tiny)
    regular = eig[:, 0] > 1e-12 * top

    sol = np.full((b, n + 1), np.nan)
    if regular.all():
        sol = np.linalg.solve(kkt, rhs[..., None])[..., 0]
    elif regular.any():
        sol[regular] = np.linalg.solve(kkt[regular], rhs[regular][..., None])[..., 0]

    redo = ~regular | ~_kkt_residual_ok(q, sol[:, :n], sol[:, n])
    for i in np.flatnonzero(redo):
        sol[i] = _singular_solve(q[i], kkt[i], rhs[i], top[i])

    c = sol[:, :n]
    c = c / c.sum(axis=1, keepdims=True)
    return c, sol[:, n] * scale, redo


def solve_kkt(q) -> KKTSolution:
    """Optimal combination vector for one node given its Gramian estimate.

    >>> solve_kkt(np.diag([1.0, 4.0])).c
    array([0.8, 0.2])
    """
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise PolicyError(f"q must be square, got shape {q.shape}")
    c, lam, fallback = solve_kkt_batch(q[None])
    return KKTSolution(c=c[0], multiplier=float(lam[0]), fallback=bool(fallback[0]))


@dataclass
class GramianCombinerState:
    """Per-node EMA state of the full Gramian rule."""

    q_hat: np.ndarray
    psi_bar: np.ndarray
    alpha1: float
    alpha2: float

    @classmethod
    def initial(cls, n_neighbors: int, dim: int, alpha1: float, alpha2: float):
        return cls(
            q_hat=np.eye(n_neighbors),
            psi_bar=np.zeros((dim, n_neighbors)),
            alpha1=alpha1,
            alpha2=alpha2,
        )


def gramian_update(state: GramianCombinerState, psi_block) -> GramianCombinerState:
    """One EMA step; ``psi_block`` holds the neighbourhood's estimates as columns.

    The instantaneous Gramian is taken against the previous mean estimate,
    then the mean is advanced.  Updates ``state`` in place and returns it.
    """
    psi_block = np.asarray(psi_block, dtype=float)
    if psi_block.shape != state.psi_bar.shape:
        raise PolicyError(
            f"psi block shape {psi_block.shape} does not match state {state.psi_bar.shape}"
        )
    dev = psi_block - state.psi_bar
    g = dev.T @ dev
    state.q_hat = (1.0 - state.alpha1) * state.q_hat + state.alpha1 * g
    state.psi_bar = (1.0 - state.alpha2) * state.psi_bar + state.alpha2 * psi_block
    return state


def adaptive_weights_full(state: GramianCombinerState) -> np.ndarray:
    return solve_kkt(state.q_hat).c


@dataclass
class DiagonalCombinerState:
    q: float
    psi_bar: np.ndarray
    alpha1: float
    alpha2: float

    @classmethod
    def initial(cls, dim: int, alpha1: float, alpha2: float):
        return cls(q=1.0, psi_bar=np.zeros(dim), alpha1=alpha1, alpha2=alpha2)


def diagonal_weight_matrix(q: np.ndarray, t: Topology) -> np.ndarray:
    """Inverse-q weights normalized over each neighbourhood; batch axes allowed.

    A neighbourhood containing an underflowed q (< DIAG_EPS) falls back to
    uniform weights for that column.
    """
    q = np.asarray(q, dtype=float)
    tiny = q < DIAG_EPS
    inv = 1.0 / np.where(tiny, 1.0, q)
    a = normalized_columns(t, inv)
    bad_cols = (tiny[..., :, None] & t.adjacency).any(axis=-2)
    if bad_cols.any():
        uniform = normalized_columns(t, np.ones(t.n_nodes))
        a = np.where(bad_cols[..., None, :], uniform, a)
    return a


def diagonal_update_and_weights(
    states: Sequence[DiagonalCombinerState], psi, t: Topology
) -> np.ndarray:
    """Advance every node's diagonal state with ``psi`` (N x M) and return A."""
    psi = np.asarray(psi, dtype=float)
    for k, st in enumerate(states):
        dev = psi[k] - st.psi_bar
        st.q = (1.0 - st.alpha1) * st.q + st.alpha1 * float(dev @ dev)
        st.psi_bar = (1.0 - st.alpha2) * st.psi_bar + st.alpha2 * psi[k]
    return diagonal_weight_matrix(np.array([st.q for st in states]), t)
