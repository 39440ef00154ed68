"""Parameters, data containers and likelihood criteria for Gaussian mixture regressions.

Two parameterisations are used. ``NaturalParams`` holds regression
coefficients ``beta``, noise scales ``sigma`` and mixing weights ``pi``.
``MixtureParams`` holds the scaled coordinates the optimiser works in::

    phi_r = beta_r / sigma_r,    rho_r = 1 / sigma_r

in which the conditional density of ``y`` given ``x`` is

    h(y | x) = sum_r pi_r * rho_r / sqrt(2 pi) * exp(-0.5 * (rho_r * y - x @ phi_r) ** 2).

All index sets in this package are 0-based.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
SIMPLEX_TOL = 1e-12


class BoundednessWarning(UserWarning):
    """Raised when a response value is exactly zero.

    The penalised criterion is only guaranteed to be bounded below when every
    response is nonzero.
    """


def _frozen(a, ndim, name):
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def _check_simplex(pi):
    if np.any(pi <= 0):
        raise ValueError("mixing proportions must be strictly positive")
    if abs(pi.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"mixing proportions must sum to 1 (sum={pi.sum()!r})")


@dataclass(frozen=True)
class NaturalParams:
    """Mixture parameters on the original scale (beta, sigma, pi)."""

    beta: np.ndarray
    sigma: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        beta = _frozen(self.beta, 2, "beta")
        sigma = _frozen(self.sigma, 1, "sigma")
        pi = _frozen(self.pi, 1, "pi")
        if not (beta.shape[0] == sigma.shape[0] == pi.shape[0]):
            raise ValueError("beta, sigma and pi disagree on the number of components")
        if np.any(sigma <= 0):
            raise ValueError("sigma must be strictly positive")
        _check_simplex(pi)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "pi", pi)

    @property
    def k(self) -> int:
        return self.beta.shape[0]

    def to_mixture(self) -> "MixtureParams":
        rho = 1.0 / self.sigma
        return MixtureParams(self.beta * rho[:, None], rho, self.pi)


@dataclass(frozen=True)
class MixtureParams:
    """Working parameters (phi, rho, pi); ``pi`` keeps all k entries."""

    phi: np.ndarray
    rho: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        phi = _frozen(self.phi, 2, "phi")
        rho = _frozen(self.rho, 1, "rho")
        pi = _frozen(self.pi, 1, "pi")
        if not (phi.shape[0] == rho.shape[0] == pi.shape[0]):
            raise ValueError("phi, rho and pi disagree on the number of components")
        if np.any(rho <= 0):
            raise ValueError("rho must be strictly positive")
        _check_simplex(pi)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "pi", pi)

    @property
    def k(self) -> int:
        return self.phi.shape[0]

    @property
    def p(self) -> int:
        return self.phi.shape[1]

    def to_natural(self) -> NaturalParams:
        # An extreme rho signals a degenerate component; the conversion is
        # still carried out as is.
        sigma = 1.0 / self.rho
        return NaturalParams(self.phi * sigma[:, None], sigma, self.pi)

    def vector(self) -> np.ndarray:
        """Flat coordinate vector (phi row-major, then rho, then pi)."""
        return np.concatenate([self.phi.ravel(), self.rho, self.pi])

    def permuted(self, order: Sequence[int]) -> "MixtureParams":
        order = np.asarray(order)
        return MixtureParams(self.phi[order], self.rho[order], self.pi[order])


@dataclass(frozen=True)
class Dataset:
    """Fixed design ``x`` (n x p) and response ``y`` (n)."""

    x: np.ndarray
    y: np.ndarray
    column_names: tuple = ()

    def __post_init__(self):
        x = _frozen(self.x, 2, "x")
        y = _frozen(self.y, 1, "y")
        n, p = x.shape
        if n < 1 or p < 1:
            raise ValueError(f"need n >= 1 and p >= 1, got x.shape={x.shape}")
        if y.shape[0] != n:
            raise ValueError(f"x has {n} rows but y has {y.shape[0]} entries")
        names = tuple(self.column_names) or tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise ValueError(f"{len(names)} column names for {p} columns")
        if np.any(y == 0.0):
            warnings.warn(
                f"{int(np.sum(y == 0.0))} response value(s) are exactly zero; the penalised "
                "criterion is then not guaranteed to be bounded from below",
                BoundednessWarning,
                stacklevel=3,
            )
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, rows) -> "Dataset":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundednessWarning)
            return Dataset(self.x[rows], self.y[rows], self.column_names)


@dataclass(frozen=True)
class PenaltySpec:
    """lambda * sum_r pi_r**gamma * sum_j w_rj |phi_rj|.

    ``weights`` may contain ``inf``; such coefficients are held at zero.
    """

    lam: float
    gamma: float = 1.0
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be finite and nonnegative, got {self.lam!r}")
        if self.gamma not in (0, 0.5, 1):
            raise ValueError(f"gamma must be one of 0, 0.5, 1, got {self.gamma!r}")
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "gamma", float(self.gamma))
        if self.weights is not None:
            w = np.array(self.weights, dtype=float)
            if w.ndim != 2 or np.any(np.isnan(w)) or np.any(w < 0):
                raise ValueError("weights must be a k x p array of nonnegative values")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)

    def weight_matrix(self, k: int, p: int) -> np.ndarray:
        if self.weights is None:
            return np.ones((k, p))
        if self.weights.shape != (k, p):
            raise ValueError(f"weights have shape {self.weights.shape}, expected {(k, p)}")
        return self.weights

    def with_lambda(self, lam: float) -> "PenaltySpec":
        return PenaltySpec(lam, self.gamma, self.weights)

    def permuted(self, order) -> "PenaltySpec":
        if self.weights is None:
            return self
        return PenaltySpec(self.lam, self.gamma, self.weights[np.asarray(order)])


@dataclass(frozen=True)
class SelectedSet:
    """Pairs (component, covariate) with a nonzero coefficient, 0-based."""

    entries: frozenset = field(default_factory=frozenset)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, item):
        return tuple(item) in self.entries

    def covariates(self) -> frozenset:
        """Covariates selected in at least one component."""
        return frozenset(j for _, j in self.entries)

    def as_mask(self, k: int, p: int) -> np.ndarray:
        mask = np.zeros((k, p), dtype=bool)
        for r, j in self.entries:
            mask[r, j] = True
        return mask


def _component_logterms(theta: MixtureParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    fitted = x @ theta.phi.T
    resid = theta.rho[None, :] * y[:, None] - fitted
    return (np.log(theta.pi) + np.log(theta.rho))[None, :] - 0.5 * resid**2 - LOG_SQRT_2PI


def log_density(theta: MixtureParams, x, y: float) -> float:
    """log h(y | x) for a single observation."""
    x = np.asarray(x, dtype=float)
    if x.shape != (theta.p,):
        raise ValueError(f"x must have shape ({theta.p},), got {x.shape}")
    if not (np.all(np.isfinite(x)) and math.isfinite(y)):
        raise ValueError("non-finite input")
    terms = _component_logterms(theta, x[None, :], np.array([float(y)]))
    return float(logsumexp(terms[0]))


def log_densities(theta: MixtureParams, data: Dataset) -> np.ndarray:
    """Vector of log h(y_i | x_i)."""
    if data.p != theta.p:
        raise ValueError(f"data has {data.p} covariates, parameters have {theta.p}")
    return logsumexp(_component_logterms(theta, data.x, data.y), axis=1)


def log_likelihood(theta: MixtureParams, data: Dataset) -> float:
    """Unscaled log-likelihood sum_i log h(y_i | x_i)."""
    return float(np.sum(log_densities(theta, data)))


def neg_log_likelihood(theta: MixtureParams, data: Dataset) -> float:
    """-(1/n) * log-likelihood."""
    return -log_likelihood(theta, data) / data.n


def weighted_l1(phi: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Row sums of w * |phi| with 0 * inf = 0."""
    absphi = np.abs(phi)
    mask = absphi > 0
    out = np.zeros(absphi.shape)
    out[mask] = weights[mask] * absphi[mask]
    return out.sum(axis=1)


def penalty_value(theta: MixtureParams, pen: PenaltySpec) -> float:
    w = pen.weight_matrix(theta.k, theta.p)
    contrib = weighted_l1(theta.phi, w)
    if np.any(np.isinf(contrib)):
        return math.inf
    return pen.lam * float(np.sum(theta.pi**pen.gamma * contrib))


def penalized_nll(theta: MixtureParams, data: Dataset, pen: PenaltySpec) -> float:
    """Scaled penalised negative log-likelihood; the objective of every fit."""
    pv = penalty_value(theta, pen)
    if math.isinf(pv):
        return math.inf
    return neg_log_likelihood(theta, data) + pv


def scale_shift_identity_check(theta: MixtureParams, data: Dataset, pen: PenaltySpec,
                               b: float) -> tuple[float, float]:
    """Both sides of the response-scaling identity.

    Returns ``(crit(phi, rho/b, pi; b*y), crit(phi, rho, pi; y) + log b)``, which
    agree for every theta when b > 0.
    """
    if not b > 0:
        raise ValueError("b must be positive")
    scaled_theta = MixtureParams(theta.phi, theta.rho / b, theta.pi)
    scaled_data = Dataset(data.x, b * data.y, data.column_names)
    lhs = penalized_nll(scaled_theta, scaled_data, pen)
    rhs = penalized_nll(theta, data, pen) + math.log(b)
    return lhs, rhs


def selected_set(theta: MixtureParams, tol: float = 0.0) -> SelectedSet:
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    rows, cols = np.nonzero(np.abs(theta.phi) > tol)
    return SelectedSet(frozenset(zip(rows.tolist(), cols.tolist())))


def snr(spec) -> float:
    """Var(Y) / Var(Y | beta = 0) for a simulation model with mean-zero covariates.

    ``spec`` needs ``full_beta()``, ``covariance()``, ``sigma`` and ``pi``.
    """
    beta = spec.full_beta()
    cov = spec.covariance()
    sigma2 = np.asarray(spec.sigma, dtype=float) ** 2
    pi = np.asarray(spec.pi, dtype=float)
    signal = np.einsum("rj,jl,rl->r", beta, cov, beta)
    return float(np.sum(pi * (signal + sigma2)) / np.sum(pi * sigma2))
