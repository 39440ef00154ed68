"""Single-component estimator in the (phi, rho) parameterisation.

Minimises the convex criterion

    -log(rho) + ||rho * y - X @ phi||^2 / (2n) + lam * sum_j w_j |phi_j|

by cyclic coordinate descent, updating rho in closed form first and then each
phi_j by soft-thresholding. Scaling y by b > 0 leaves phi unchanged and
divides rho by b.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .model import Dataset, weighted_l1
from .options import OptimOptions


@dataclass(frozen=True)
class ScaledLassoFit:
    phi: np.ndarray
    rho: float
    criterion: float
    kkt_residual: float
    iterations: int
    converged: bool
    lam: float
    trace: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))

    @property
    def beta(self) -> np.ndarray:
        return self.phi / self.rho

    @property
    def sigma(self) -> float:
        return 1.0 / self.rho


def rho_closed_form(y_tilde, fitted, n_r: float) -> float:
    """Exact minimiser over rho of -n_r log(rho) + ||rho * y_tilde - fitted||^2 / 2."""
    y_tilde = np.asarray(y_tilde, dtype=float)
    fitted = np.asarray(fitted, dtype=float)
    yy = float(y_tilde @ y_tilde)
    if yy <= 0.0:
        raise ValueError("y_tilde must not be identically zero")
    yf = float(y_tilde @ fitted)
    return (yf + math.sqrt(yf * yf + 4.0 * yy * n_r)) / (2.0 * yy)


def phi_coordinate_update(s_j: float, col_norm_sq: float, threshold: float) -> float:
    """Minimiser of 0.5 * col_norm_sq * z**2 + s_j * z + threshold * |z|."""
    if not col_norm_sq > 0:
        raise ValueError("col_norm_sq must be positive")
    if s_j > threshold:
        return (threshold - s_j) / col_norm_sq
    if s_j < -threshold:
        return -(threshold + s_j) / col_norm_sq
    return 0.0


def lambda_max(data: Dataset, weights: Optional[np.ndarray] = None) -> float:
    """Smallest lambda at which the single-component fit is identically zero."""
    ynorm = float(np.linalg.norm(data.y))
    if ynorm == 0.0:
        raise ValueError("response vector is identically zero")
    scores = np.abs(data.x.T @ data.y) / (math.sqrt(data.n) * ynorm)
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            scores = np.where(np.isinf(w), 0.0, scores / w)
    return float(np.max(scores))


def criterion(phi, rho: float, data: Dataset, lam: float, weights=None) -> float:
    phi = np.asarray(phi, dtype=float)
    resid = rho * data.y - data.x @ phi
    w = np.ones_like(phi) if weights is None else np.asarray(weights, dtype=float)
    pen = float(weighted_l1(phi[None, :], w.reshape(1, -1))[0])
    return -math.log(rho) + float(resid @ resid) / (2 * data.n) + lam * pen


def kkt_residuals(phi, rho: float, data: Dataset, lam: float, weights=None) -> np.ndarray:
    """Per-coordinate optimality violations followed by the rho stationarity residual."""
    phi = np.asarray(phi, dtype=float)
    n = data.n
    w = np.ones_like(phi) if weights is None else np.asarray(weights, dtype=float)
    grad = data.x.T @ (data.x @ phi) - rho * (data.x.T @ data.y)
    thr = n * lam * w
    nz = phi != 0
    with np.errstate(invalid="ignore"):
        res = np.where(nz, np.abs(grad + thr * np.sign(phi)),
                       np.maximum(0.0, np.abs(grad) - thr))
    res = np.where(np.isinf(thr) & ~nz, 0.0, res)
    yy = float(data.y @ data.y)
    yf = float(data.y @ (data.x @ phi))
    rho_res = abs(-n / rho + rho * yy - yf)
    return np.append(res, rho_res)


def kkt_check(fit, data: Dataset, lam: float, weights=None) -> float:
    """Largest violation of the single-component optimality conditions.

    ``fit`` is anything with ``phi`` and ``rho`` attributes.
    """
    phi = np.asarray(fit.phi, dtype=float)
    if phi.shape != (data.p,):
        raise ValueError(f"fit has {phi.shape} coefficients, data has p={data.p}")
    return float(np.max(kkt_residuals(phi, float(fit.rho), data, lam, weights)))


def fit_scaled_lasso(data: Dataset, lam: float, opts: Optional[OptimOptions] = None,
                     weights=None, init_phi=None) -> ScaledLassoFit:
    """Coordinate descent until the KKT residual drops to ``opts.kkt_tol``."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    opts = opts or OptimOptions()
    n, p = data.n, data.p
    X = np.asfortranarray(data.x)
    y = np.ascontiguousarray(data.y)
    ones = np.ones(n)
    w = np.ones(p) if weights is None else np.asarray(weights, dtype=float)
    thresholds = n * lam * w
    phi = np.zeros(p) if init_phi is None else np.array(init_phi, dtype=float)
    phi[np.isinf(w)] = 0.0
    coords = np.arange(p, dtype=np.int64)
    rho = 1.0
    trace = []
    converged = False
    kkt = math.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        fitted = X @ phi
        rho = _kernels.component_sweep(X, y, ones, phi, fitted, rho, float(n), thresholds, coords)
        trace.append(criterion(phi, rho, data, lam, w))
        kkt = kkt_check(_Point(phi, rho), data, lam, w)
        if kkt <= opts.kkt_tol:
            converged = True
            break
    return ScaledLassoFit(phi=phi, rho=float(rho), criterion=trace[-1], kkt_residual=kkt,
                          iterations=it, converged=converged, lam=float(lam),
                          trace=np.asarray(trace))


def scaled_lasso_path(data: Dataset, lambdas: Sequence[float],
                      opts: Optional[OptimOptions] = None, weights=None) -> list[ScaledLassoFit]:
    """Fits along ``lambdas`` in descending order, each warm-started from the previous.

    Returned in the order of ``lambdas``.
    """
    order = np.argsort(lambdas)[::-1]
    fits: dict[int, ScaledLassoFit] = {}
    prev = None
    for idx in order:
        f = fit_scaled_lasso(data, float(lambdas[idx]), opts, weights,
                             init_phi=None if prev is None else prev.phi)
        fits[int(idx)] = prev = f
    return [fits[i] for i in range(len(lambdas))]


@dataclass
class _Point:
    phi: np.ndarray
    rho: float
