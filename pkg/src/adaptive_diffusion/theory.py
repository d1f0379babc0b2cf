"""Closed-form steady-state predictions for the Gramian-based adaptive policy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .combiners import normalized_columns
from .network import Topology

__all__ = [
    "TheoryError",
    "MSDPrediction",
    "SteadyStatePrediction",
    "to_db",
    "relative_variance_theta",
    "q_infinity",
    "a_infinity",
    "perron_vector",
    "msd_low_rank",
    "predict_steady_state",
]

DB_FLOOR = -400.0


class TheoryError(ValueError):
    pass


def to_db(x):
    """10 log10(x); nonpositive inputs map to the DB_FLOOR sentinel."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(x > 0, 10.0 * np.log10(np.where(x > 0, x, 1.0)), DB_FLOOR)
    return float(out) if out.ndim == 0 else out


def relative_variance_theta(mu, sigma2) -> np.ndarray:
    """theta_k = 1 / (mu_k^2 sigma_{s,k}^2)."""
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(mu <= 0) or np.any(sigma2 <= 0):
        raise TheoryError("step sizes and noise powers must be positive")
    return 1.0 / (mu**2 * sigma2)


def q_infinity(mu, sigma2) -> np.ndarray:
    """Diagonal of the limiting expected Gramian estimate, 1/2 mu_k^2 sigma_{s,k}^2."""
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(mu <= 0) or np.any(sigma2 <= 0):
        raise TheoryError("step sizes and noise powers must be positive")
    return 0.5 * mu**2 * sigma2


def a_infinity(t: Topology, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (t.n_nodes,) or np.any(theta <= 0):
        raise TheoryError("theta must be a positive vector with one entry per node")
    return normalized_columns(t, theta)


def perron_vector(t: Topology, theta, tol: float = 1e-10) -> np.ndarray:
    """Perron vector of the limiting policy: p_k proportional to theta_k * sum_{N_k} theta.

    The result is checked against the fixed point A_inf p = p.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (t.n_nodes,) or np.any(theta <= 0):
        raise TheoryError("theta must be a positive vector with one entry per node")
    nbr_sums = t.adjacency.astype(float) @ theta
    p = theta * nbr_sums
    p = p / p.sum()
    resid = np.abs(a_infinity(t, theta) @ p - p).max()
    if resid > tol:
        raise TheoryError(f"Perron fixed-point residual {resid:.3e} exceeds {tol:.1e}")
    return p


class MSDPrediction(NamedTuple):
    linear: float
    db: float


def msd_low_rank(mu, perron, hessians: Sequence, noise_covs: Sequence) -> MSDPrediction:
    """1/2 Tr[(sum_k mu_k p_k H_k)^-1 (sum_k mu_k^2 p_k^2 R_k)]."""
    mu = np.asarray(mu, dtype=float)
    p = np.asarray(perron, dtype=float)
    hess = np.asarray(hessians, dtype=float)
    covs = np.asarray(noise_covs, dtype=float)
    weight = mu * p
    agg_h = np.einsum("k,kij->ij", weight, hess)
    agg_r = np.einsum("k,kij->ij", weight**2, covs)
    try:
        chol = np.linalg.cholesky(0.5 * (agg_h + agg_h.T))
    except np.linalg.LinAlgError:
        raise TheoryError("aggregate Hessian is not positive definite") from None
    y = np.linalg.solve(chol, agg_r)
    x = np.linalg.solve(chol.T, y)
    msd = 0.5 * float(np.trace(x))
    return MSDPrediction(msd, to_db(msd))


@dataclass(frozen=True)
class SteadyStatePrediction:
    q_inf_diag: np.ndarray
    a_inf: np.ndarray
    perron: np.ndarray
    msd_av: float
    theta: np.ndarray

    @property
    def msd_av_db(self) -> float:
        return to_db(self.msd_av)

    def to_dict(self) -> dict:
        return {
            "q_inf_diag": self.q_inf_diag.tolist(),
            "perron": self.perron.tolist(),
            "msd_av": self.msd_av,
            "msd_av_db": self.msd_av_db,
        }


def predict_steady_state(t: Topology, mu, hessians, noise_covs) -> SteadyStatePrediction:
    """Bundle every predictor, taking sigma_{s,k}^2 as trace(R_{s,k})."""
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.array([np.trace(r) for r in noise_covs])
    theta = relative_variance_theta(mu, sigma2)
    p = perron_vector(t, theta)
    msd = msd_low_rank(mu, p, hessians, noise_covs)
    if not math.isfinite(msd.linear):
        raise TheoryError("non-finite MSD prediction")
    return SteadyStatePrediction(
        q_inf_diag=q_infinity(mu, sigma2),
        a_inf=a_infinity(t, theta),
        perron=p,
        msd_av=msd.linear,
        theta=theta,
    )
