"""Per-node streaming risks for the decentralized logistic-regression benchmark.

Each node k observes i.i.d. pairs (gamma, h) with gamma uniform on {+1, -1}
and h ~ N(gamma * mean_scale * 1_M, var * I_M), and minimizes

    J_k(w) = E ln(1 + exp(-gamma h^T w)) + reg/2 ||w||^2.

A datum is always drawn from a single row of M + 1 standard normals: the sign
of the first entry is the label, the remaining M entries are the feature
noise.  Keeping the per-datum draw fixed-width makes every random stream
independent of how many iterations are requested per call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, log_expit

__all__ = [
    "LogisticNodeModel",
    "QuadraticNodeModel",
    "GroundTruth",
    "NodeStatistics",
    "CalibrationError",
    "sample_datum",
    "data_from_normals",
    "stochastic_gradient",
    "instantaneous_loss",
    "expected_gradient",
    "calibrate_common_minimizer",
    "estimate_node_statistics",
    "draw_node_parameters",
]


class CalibrationError(RuntimeError):
    """The common-minimizer calibration could not be satisfied."""


@dataclass(frozen=True)
class LogisticNodeModel:
    dim: int
    mean_scale: float
    var: float
    reg: float
    step: float

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if not self.var > 0:
            raise ValueError(f"feature variance must be positive, got {self.var}")
        if not self.step > 0:
            raise ValueError(f"step size must be positive, got {self.step}")
        if self.reg < 0:
            raise ValueError(f"regularizer must be nonnegative, got {self.reg}")

    @property
    def std(self) -> float:
        return math.sqrt(self.var)


@dataclass(frozen=True)
class QuadraticNodeModel:
    """Debug model J(w) = 1/2 ||w - target||^2 with additive Gaussian gradient noise."""

    dim: int
    target: np.ndarray
    step: float
    noise_std: float = 0.0

    def __post_init__(self) -> None:
        target = np.asarray(self.target, dtype=float)
        if target.shape != (self.dim,):
            raise ValueError(f"target must have length {self.dim}")
        object.__setattr__(self, "target", target)


@dataclass(frozen=True)
class GroundTruth:
    w_star: np.ndarray
    grad_residuals: np.ndarray
    regs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scale: float = 0.0


@dataclass(frozen=True)
class NodeStatistics:
    hessian_at_opt: np.ndarray
    noise_cov: np.ndarray

    @property
    def noise_power(self) -> float:
        return float(np.trace(self.noise_cov))


def data_from_normals(z: np.ndarray, mean_scale, std) -> tuple[np.ndarray, np.ndarray]:
    """Map standard-normal rows of width M + 1 to (label, features).

    ``mean_scale`` and ``std`` broadcast against the leading axes of ``z``.
    """
    labels = np.where(z[..., 0] >= 0.0, 1.0, -1.0)
    mean_scale = np.asarray(mean_scale, dtype=float)[..., None]
    std = np.asarray(std, dtype=float)[..., None]
    features = labels[..., None] * mean_scale + std * z[..., 1:]
    return labels, features


def sample_datum(model, rng: np.random.Generator):
    """Draw one (label, features) pair for ``model``.

    For a :class:`QuadraticNodeModel` the label is always 1 and the vector is
    the additive gradient noise.
    """
    z = rng.standard_normal(model.dim + 1)
    if isinstance(model, QuadraticNodeModel):
        return 1.0, model.noise_std * z[1:]
    label, features = data_from_normals(z, model.mean_scale, model.std)
    return float(label), features


def stochastic_gradient(model, w, datum) -> np.ndarray:
    """Gradient of the instantaneous loss at ``w``; broadcasts over leading axes."""
    label, h = datum
    w = np.asarray(w, dtype=float)
    if isinstance(model, QuadraticNodeModel):
        return w - model.target + h
    h = np.asarray(h, dtype=float)
    label = np.asarray(label, dtype=float)
    margin = label * np.einsum("...m,...m->...", h, w)
    scale = -label * expit(-margin)
    return scale[..., None] * h + model.reg * w


def instantaneous_loss(model, w, datum) -> np.ndarray:
    label, h = datum
    w = np.asarray(w, dtype=float)
    if isinstance(model, QuadraticNodeModel):
        return 0.5 * np.sum((w - model.target) ** 2, axis=-1) + np.einsum("...m,...m->...", h, w)
    margin = np.asarray(label) * np.einsum("...m,...m->...", np.asarray(h), w)
    return -log_expit(margin) + 0.5 * model.reg * np.sum(w * w, axis=-1)


def _draw_batch(model, rng: np.random.Generator, n: int):
    z = rng.standard_normal((n, model.dim + 1))
    if isinstance(model, QuadraticNodeModel):
        return np.ones(n), model.noise_std * z[:, 1:]
    return data_from_normals(z, model.mean_scale, model.std)


def _iter_batches(n_samples: int, chunk: int = 200_000):
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        yield n
        done += n


def expected_gradient(model, w, n_samples: int, seed=None) -> np.ndarray:
    """Monte Carlo estimate of grad J_k(w) from ``n_samples`` fresh draws."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    w = np.asarray(w, dtype=float)
    rng = np.random.default_rng(seed)
    total = np.zeros(model.dim)
    for n in _iter_batches(n_samples):
        total += stochastic_gradient(model, w, _draw_batch(model, rng, n)).sum(axis=0)
    return total / n_samples


# Common-minimizer calibration.
#
# With u = gamma * h ~ N(mean_scale * 1, var * I), the unregularized gradient at
# w = c * 1 is -E[u * sigmoid(-c * 1^T u)].  Every coordinate has the same
# expectation, and conditioning on z = 1^T u gives E[u_j | z] = z / M, so the
# per-coordinate pull is the one-dimensional expectation
#     s(c) = E[(z / M) * sigmoid(-c z)],   z ~ N(M * mean_scale, M * var).
# Stationarity of node k at c * 1 then requires reg_k = s_k(c) / c.

_GH_ORDER = 160


def _pull_quadrature(model: LogisticNodeModel, c: float, order: int = _GH_ORDER) -> float:
    x, wts = np.polynomial.hermite_e.hermegauss(order)
    m = model.dim
    z = m * model.mean_scale + math.sqrt(m * model.var) * x
    return float(np.dot(wts, (z / m) * expit(-c * z)) / math.sqrt(2.0 * math.pi))


def _pull_monte_carlo(model: LogisticNodeModel, c: float, x: np.ndarray) -> float:
    m = model.dim
    z = m * model.mean_scale + math.sqrt(m * model.var) * x
    return float(np.mean((z / m) * expit(-c * z)))


def calibrate_common_minimizer(
    models: Sequence[LogisticNodeModel],
    target_reg: float = 0.5,
    tol: float = 1e-3,
    seed=None,
    method: str = "quadrature",
    n_samples: int = 10**6,
) -> tuple[GroundTruth, list[LogisticNodeModel]]:
    """Pick w° = c * 1 and per-node regularizers so every J_k is stationary at w°.

    ``c`` is found by root finding so that the mean regularizer equals
    ``target_reg``.  ``method="quadrature"`` evaluates the one-dimensional
    expectation by Gauss-Hermite quadrature; ``"monte_carlo"`` uses
    ``n_samples`` common draws per node.  Returns the ground truth and copies
    of ``models`` carrying the adjusted ``reg``.
    """
    if not models:
        raise CalibrationError("no node models given")
    dims = {m.dim for m in models}
    if len(dims) != 1:
        raise CalibrationError(f"models disagree on dimension: {sorted(dims)}")
    if not target_reg > 0:
        raise CalibrationError(f"target_reg must be positive, got {target_reg}")
    dim = dims.pop()

    if method == "quadrature":
        pulls = [lambda c, m=m: _pull_quadrature(m, c) for m in models]
    elif method == "monte_carlo":
        rng = np.random.default_rng(seed)
        draws = [rng.standard_normal(n_samples) for _ in models]
        pulls = [lambda c, m=m, x=x: _pull_monte_carlo(m, c, x) for m, x in zip(models, draws)]
    else:
        raise CalibrationError(f"unknown calibration method {method!r}")

    def excess(c: float) -> float:
        return float(np.mean([s(c) for s in pulls]) / c - target_reg)

    lo, hi = 1e-6, 1e-2
    if excess(lo) <= 0:
        raise CalibrationError("target_reg too large to bracket the minimizer scale")
    while excess(hi) > 0:
        hi *= 2.0
        if hi > 1e4:
            raise CalibrationError("could not bracket the minimizer scale")
    c = brentq(excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)

    regs = np.array([s(c) / c for s in pulls])
    if np.any(regs <= 0):
        bad = np.flatnonzero(regs <= 0).tolist()
        raise CalibrationError(f"non-positive regularizer for nodes {bad}")
    calibrated = [replace(m, reg=float(r)) for m, r in zip(models, regs)]

    # Residual check with an independent, finer quadrature; the component
    # orthogonal to 1 vanishes by symmetry of the data model.
    residuals = np.array(
        [
            math.sqrt(dim) * abs(m.reg * c - _pull_quadrature(m, c, order=2 * _GH_ORDER))
            for m in calibrated
        ]
    )
    if np.any(residuals >= tol):
        raise CalibrationError(
            f"gradient residual {residuals.max():.3e} exceeds tolerance {tol:.1e}"
        )
    truth = GroundTruth(
        w_star=np.full(dim, c), grad_residuals=residuals, regs=regs, scale=float(c)
    )
    return truth, calibrated


def estimate_node_statistics(model, w_star, n_samples: int = 10**5, seed=None) -> NodeStatistics:
    """Monte Carlo estimates of the Hessian and gradient-noise covariance at w°."""
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    w_star = np.asarray(w_star, dtype=float)
    rng = np.random.default_rng(seed)
    label, h = _draw_batch(model, rng, n_samples)
    grads = stochastic_gradient(model, w_star, (label, h))
    if isinstance(model, QuadraticNodeModel):
        hess = np.eye(model.dim)
    else:
        margin = label * (h @ w_star)
        curv = expit(margin) * expit(-margin)
        hess = (h * curv[:, None]).T @ h / n_samples + model.reg * np.eye(model.dim)
    centered = grads - grads.mean(axis=0)
    cov = centered.T @ centered / (n_samples - 1)
    return NodeStatistics(
        hessian_at_opt=0.5 * (hess + hess.T), noise_cov=0.5 * (cov + cov.T)
    )


def draw_node_parameters(
    n_nodes: int,
    rng: np.random.Generator,
    mean_range: tuple[float, float] = (0.6, 1.4),
    var_range: tuple[float, float] = (1e-2, 1.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Feature mean scales (uniform) and variances (log-uniform) per node."""
    means = rng.uniform(mean_range[0], mean_range[1], size=n_nodes)
    log_lo, log_hi = np.log(var_range[0]), np.log(var_range[1])
    variances = np.exp(rng.uniform(log_lo, log_hi, size=n_nodes))
    return means, variances
