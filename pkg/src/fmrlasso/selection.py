"""Tuning of (k, lambda, gamma): lambda grids, modified BIC, K-fold CV, adaptive refits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .gem import DegenerateComponentError, FitResult, fit_bcd_gem
from .model import Dataset, MixtureParams, PenaltySpec, log_likelihood
from .options import OptimOptions
from .scaled_lasso import lambda_max


class FoldFitError(RuntimeError):
    def __init__(self, fold: int, cause: Exception):
        self.fold = fold
        self.cause = cause
        super().__init__(f"fit on the complement of fold {fold} failed: {cause}")


class DegenerateInitializationError(ValueError):
    """The initial estimate has no nonzero coefficient, so every adaptive weight is infinite."""


class SelectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SelectionRecord:
    k: int
    lam: float
    gamma: float
    bic: float
    cv_loss: float
    d_e: int
    criterion: float
    converged: bool
    n_iterations: int
    error: Optional[str] = None
    fit: Optional[FitResult] = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {
            "k": self.k,
            "lambda": self.lam,
            "gamma": self.gamma,
            "bic": self.bic,
            "cv_loss": self.cv_loss,
            "d_e": self.d_e,
            "criterion": self.criterion,
            "converged": self.converged,
            "n_iterations": self.n_iterations,
            "error": self.error,
        }


@dataclass(frozen=True)
class SelectionResult:
    best: tuple
    table: list
    criterion_kind: str

    @property
    def best_record(self) -> SelectionRecord:
        k, lam, gamma = self.best
        for rec in self.table:
            if rec.k == k and rec.lam == lam and rec.gamma == gamma:
                return rec
        raise LookupError(self.best)

    @property
    def best_fit(self) -> FitResult:
        return self.best_record.fit


def lambda_grid(data: Dataset, m: int = 20, spacing: str = "log", ratio: float = 0.01,
                include_zero: bool = False, weights=None) -> np.ndarray:
    """Strictly increasing grid ending at lambda_max.

    ``log`` spacing runs geometrically from ``ratio * lambda_max``; ``linear``
    spacing starts at 0. ``include_zero`` prepends 0 to a log grid.
    """
    if m < 2:
        raise ValueError("a grid needs at least 2 points")
    lmax = lambda_max(data, weights)
    if spacing == "linear":
        return np.linspace(0.0, lmax, m)
    if spacing != "log":
        raise ValueError(f"unknown spacing {spacing!r}")
    if include_zero:
        return np.concatenate([[0.0], np.geomspace(ratio * lmax, lmax, m - 1)])
    return np.geomspace(ratio * lmax, lmax, m)


def effective_dof(theta: MixtureParams) -> int:
    k = theta.k
    return k + (k - 1) + int(np.count_nonzero(theta.phi))


def bic(fit, data: Dataset) -> float:
    """-2 * log-likelihood + log(n) * (k + (k - 1) + #nonzero coefficients)."""
    theta = fit.theta if isinstance(fit, FitResult) else fit
    return -2.0 * log_likelihood(theta, data) + math.log(data.n) * effective_dof(theta)


def _fold_ids(n: int, folds: int, seed) -> np.ndarray:
    if not 2 <= folds <= n:
        raise ValueError(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    rng = np.random.default_rng(seed)
    ids = np.arange(n) % folds
    return ids[rng.permutation(n)]


def fit_path(data: Dataset, k: int, lambdas: Sequence[float], gamma: float = 1.0,
             opts: Optional[OptimOptions] = None, weights=None,
             init: Optional[MixtureParams] = None, warm_start: bool = True) -> list:
    """Fits along ``lambdas`` from the largest value down; returned in input order.

    Each entry is a ``FitResult`` or the exception that ended that fit. With
    ``warm_start`` the previous solution is tried alongside the random starts
    and the lower criterion is kept. Passing ``init`` replaces the random
    starts: the path then starts from ``init`` and continues warm.
    """
    opts = opts or OptimOptions()
    order = np.argsort(np.asarray(lambdas, dtype=float), kind="stable")[::-1]
    out: dict = {}
    prev = init
    for idx in order:
        pen = PenaltySpec(float(lambdas[idx]), gamma, weights)
        candidates = []
        errors = []
        if warm_start and prev is not None:
            try:
                candidates.append(fit_bcd_gem(data, k, pen, opts, init=prev))
            except DegenerateComponentError as err:
                errors.append(err)
        if init is None:
            try:
                candidates.append(fit_bcd_gem(data, k, pen, opts))
            except DegenerateComponentError as err:
                errors.append(err)
        if candidates:
            best = min(candidates, key=lambda f: f.criterion)
            out[int(idx)] = best
            # fits order components by pi; undo that so rows keep matching the weights
            if weights is None or k == 1:
                prev = best.theta
            else:
                prev = _unpermute(best, weights)
        else:
            out[int(idx)] = errors[-1]
    return [out[i] for i in range(len(lambdas))]


def _unpermute(fit: FitResult, weights) -> MixtureParams:
    """Put the components of ``fit`` back in the row order of ``weights``."""
    w_fit = fit.penalty.weights
    weights = np.asarray(weights)
    order = []
    for r in range(weights.shape[0]):
        for s in range(w_fit.shape[0]):
            if s not in order and np.array_equal(w_fit[s], weights[r]):
                order.append(s)
                break
    if len(order) != weights.shape[0]:
        return fit.theta
    return fit.theta.permuted(order)


def _heldout_loss(fit: FitResult, test: Dataset) -> float:
    return -2.0 * log_likelihood(fit.theta, test)


def cross_validate_path(data: Dataset, k: int, lambdas: Sequence[float], gamma: float = 1.0,
                        folds: int = 10, opts: Optional[OptimOptions] = None, seed=0,
                        weights=None, init=None, fold_ids=None) -> np.ndarray:
    """Summed held-out ``-2 * log-likelihood`` for every lambda.

    Folds come from a seeded shuffle unless ``fold_ids`` (one label in
    ``0..folds-1`` per row) is given. Raises ``FoldFitError`` naming the first
    fold whose fit failed.
    """
    if fold_ids is None:
        ids = _fold_ids(data.n, folds, seed)
    else:
        ids = np.asarray(fold_ids)
        if ids.shape != (data.n,) or ids.min() < 0 or ids.max() >= folds:
            raise ValueError("fold_ids must assign every row to a fold in 0..folds-1")
    losses = np.zeros(len(lambdas))
    for f in range(folds):
        train = data.subset(ids != f)
        test = data.subset(ids == f)
        fits = fit_path(train, k, lambdas, gamma, opts, weights, init)
        for i, fit in enumerate(fits):
            if isinstance(fit, Exception):
                raise FoldFitError(f, fit)
            losses[i] += _heldout_loss(fit, test)
    return losses


def cross_validate(data: Dataset, k: int, pen: PenaltySpec, folds: int = 10,
                   opts: Optional[OptimOptions] = None, seed=0) -> float:
    """K-fold CV loss of a single penalty setting; folds come from a seeded shuffle."""
    return float(cross_validate_path(data, k, [pen.lam], pen.gamma, folds, opts, seed,
                                     pen.weights)[0])


def _argmin(records, key):
    usable = [r for r in records if r.error is None and math.isfinite(getattr(r, key))]
    if not usable:
        raise SelectionError("every grid cell failed")
    # ties: larger lambda, then smaller k
    return min(usable, key=lambda r: (getattr(r, key), -r.lam, r.k))


def select(data: Dataset, k_range: Iterable[int] = (1, 2, 3), lambdas=None,
           gammas: Iterable[float] = (1.0,), criterion: str = "bic",
           opts: Optional[OptimOptions] = None, folds: int = 10, seed=0,
           weights=None, init=None, n_lambda: int = 20) -> SelectionResult:
    """Exhaustive search over k x lambda x gamma minimising BIC or CV loss.

    ``lambdas=None`` uses ``lambda_grid(data, n_lambda)``. Failed cells stay in
    the table with their error message and never win.
    """
    criterion = criterion.lower()
    if criterion not in ("bic", "cv"):
        raise ValueError(f"criterion must be 'bic' or 'cv', got {criterion!r}")
    opts = opts or OptimOptions()
    k_range = list(k_range)
    gammas = list(gammas)
    if not k_range or not gammas:
        raise ValueError("empty grid")
    if lambdas is None:
        w1 = None if weights is None else np.min(np.asarray(weights), axis=0)
        lambdas = lambda_grid(data, n_lambda, weights=w1)
    lambdas = [float(v) for v in lambdas]
    if not lambdas:
        raise ValueError("empty lambda grid")

    table = []
    for k in k_range:
        w_k = weights if (weights is None or np.shape(weights)[0] == k) else None
        for gamma in gammas:
            fits = fit_path(data, k, lambdas, gamma, opts, w_k, init if w_k is not None else None)
            cv = np.full(len(lambdas), np.nan)
            cv_error = None
            if criterion == "cv":
                try:
                    cv = cross_validate_path(data, k, lambdas, gamma, folds, opts, seed, w_k,
                                             init if w_k is not None else None)
                except FoldFitError as err:
                    cv_error = str(err)
            for lam, fit, cv_loss in zip(lambdas, fits, cv):
                if isinstance(fit, Exception):
                    table.append(SelectionRecord(k, lam, gamma, math.nan, math.nan, -1, math.nan,
                                                 False, 0, error=str(fit)))
                    continue
                table.append(SelectionRecord(
                    k=k, lam=lam, gamma=gamma, bic=bic(fit, data), cv_loss=float(cv_loss),
                    d_e=effective_dof(fit.theta), criterion=fit.criterion,
                    converged=fit.converged, n_iterations=fit.n_iterations,
                    error=cv_error, fit=fit,
                ))
    best = _argmin(table, "bic" if criterion == "bic" else "cv_loss")
    return SelectionResult((best.k, best.lam, best.gamma), table, criterion)


def adaptive_weights(initial: MixtureParams) -> np.ndarray:
    """1 / |phi_ini|, infinite where the initial coefficient is zero."""
    absphi = np.abs(initial.phi)
    if not np.any(absphi > 0):
        raise DegenerateInitializationError("initial estimate has no nonzero coefficient")
    with np.errstate(divide="ignore"):
        return np.where(absphi > 0, 1.0 / absphi, np.inf)


def fit_adaptive(data: Dataset, k: int, initial: MixtureParams, lambdas=None,
                 gamma: float = 1.0, criterion: str = "bic",
                 opts: Optional[OptimOptions] = None, folds: int = 10, seed=0,
                 n_lambda: int = 20) -> tuple[FitResult, SelectionResult]:
    """Second-stage fit with weights 1/|phi_ini|; coefficients zero in ``initial`` stay zero."""
    if initial.k != k:
        raise ValueError("initial estimate has a different number of components")
    weights = adaptive_weights(initial)
    result = select(data, [k], lambdas, [gamma], criterion, opts, folds, seed,
                    weights=weights, init=initial, n_lambda=n_lambda)
    return result.best_fit, result
