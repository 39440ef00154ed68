"""Simulation designs, data generation and evaluation metrics.

Generation recipe (fixed for reproducibility): ``rng = numpy.random.default_rng(seed)``;
draw ``Z = rng.standard_normal((n, p_tot))`` and set ``X = Z @ L.T`` with ``L``
the lower Cholesky factor of the covariate covariance; then draw the component
labels with ``rng.choice(k, size=n, p=pi)``; finally the noise
``rng.standard_normal(n)``.
"""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .gem import FitResult
from .model import Dataset, MixtureParams, NaturalParams, log_likelihood
from .options import OptimOptions
from .selection import adaptive_weights, fit_adaptive, fit_path, lambda_grid, select

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    n: int
    beta: np.ndarray
    sigma: tuple
    pi: tuple
    cov_kind: str = "identity"
    rate: float = 0.0
    p_tot: Optional[int] = None

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float)
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
        object.__setattr__(self, "pi", tuple(float(v) for v in self.pi))
        if self.p_tot is None:
            object.__setattr__(self, "p_tot", beta.shape[1])
        if self.p_tot < beta.shape[1]:
            raise ValueError("p_tot must be >= the number of active covariates")
        if not (len(self.sigma) == len(self.pi) == beta.shape[0]):
            raise ValueError("beta, sigma, pi disagree on k")
        if self.cov_kind not in ("identity", "ar1"):
            raise ValueError(f"unknown covariance kind {self.cov_kind!r}")
        if self.cov_kind == "ar1" and not 0 < self.rate < 1:
            raise ValueError("ar1 rate must lie in (0, 1)")

    @property
    def k(self) -> int:
        return self.beta.shape[0]

    @property
    def p_act(self) -> int:
        return self.beta.shape[1]

    def full_beta(self) -> np.ndarray:
        out = np.zeros((self.k, self.p_tot))
        out[:, : self.p_act] = self.beta
        return out

    def active(self) -> frozenset:
        return frozenset(np.flatnonzero(np.any(self.full_beta() != 0, axis=0)).tolist())

    def covariance(self) -> np.ndarray:
        if self.cov_kind == "identity":
            return np.eye(self.p_tot)
        idx = np.arange(self.p_tot)
        return self.rate ** np.abs(idx[:, None] - idx[None, :])

    def truth(self) -> NaturalParams:
        return NaturalParams(self.full_beta(), np.array(self.sigma), np.array(self.pi))

    def with_ptot(self, p_tot: int) -> "ModelSpec":
        return replace(self, p_tot=int(p_tot))


_M_BASE = dict(beta=[[3.0] * 5, [-1.0] * 5], pi=(0.5, 0.5), n=100)
_PRESETS = {
    "M1": dict(_M_BASE, sigma=(0.5, 0.5)),
    "M2": dict(_M_BASE, sigma=(1.0, 1.0)),
    "M3": dict(_M_BASE, sigma=(1.5, 1.5)),
    "M4": dict(
        beta=[[3, 3, 0, 0, 0, 0], [0, 0, -2, -2, 0, 0], [0, 0, 0, 0, -3, 2]],
        sigma=(0.5, 0.5, 0.5), pi=(1 / 3, 1 / 3, 1 / 3), n=150,
    ),
    "M5": dict(_M_BASE, sigma=(0.95, 0.95), cov_kind="ar1", rate=0.8),
    "M1_UNBALANCED": dict(_M_BASE, sigma=(0.5, 0.5), pi=(0.3, 0.7), p_tot=50),
}


def sparsity_series(i: int) -> ModelSpec:
    """Model ``i`` (1..7) of the sparsity series: p_act = i + 2, n = 50 i, p_tot = 10 * 2**(i-1)."""
    if not 1 <= i <= 7:
        raise ValueError("sparsity series index must be in 1..7")
    p_act = i + 2
    return ModelSpec(
        name=f"sparsity_series({i})", n=50 * i,
        beta=[[3.0] * p_act, [-1.0] * p_act], sigma=(0.5, 0.5), pi=(0.5, 0.5),
        p_tot=10 * 2 ** (i - 1),
    )


def preset(name: str, p_tot: Optional[int] = None) -> ModelSpec:
    """Named simulation design: M1..M5, M1_unbalanced or ``sparsity_series(i)``."""
    m = re.fullmatch(r"\s*sparsity_series\((\d+)\)\s*", name)
    if m:
        spec = sparsity_series(int(m.group(1)))
    else:
        key = name.strip().upper()
        if key not in _PRESETS:
            raise KeyError(f"unknown model {name!r}")
        spec = ModelSpec(name=name.strip(), **_PRESETS[key])
    return spec if p_tot is None else spec.with_ptot(p_tot)


def generate(spec: ModelSpec, seed, n: Optional[int] = None):
    """Draw one dataset; returns ``(Dataset, NaturalParams truth, labels)``."""
    n = spec.n if n is None else int(n)
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(spec.covariance())
    x = rng.standard_normal((n, spec.p_tot)) @ chol.T
    labels = rng.choice(spec.k, size=n, p=np.array(spec.pi))
    beta = spec.full_beta()
    sigma = np.array(spec.sigma)
    y = np.einsum("ij,ij->i", x, beta[labels]) + sigma[labels] * rng.standard_normal(n)
    return Dataset(x, y), spec.truth(), labels


@dataclass(frozen=True)
class RunMetrics:
    pred_loss: float
    tp: int
    fp: int
    tpr: float
    fpr: float


def evaluate(fit, truth_active, test: Dataset) -> RunMetrics:
    """Test-set ``-2 * log-likelihood`` and selection counts.

    A covariate counts as selected when its coefficient is nonzero in at least
    one component, so no label matching is needed.
    """
    theta = fit.theta if isinstance(fit, FitResult) else fit
    if theta.p != test.p:
        raise ValueError("fit and test data disagree on p")
    active = frozenset(truth_active)
    selected = frozenset(np.flatnonzero(np.any(theta.phi != 0, axis=0)).tolist())
    tp = len(selected & active)
    fp = len(selected - active)
    n_inactive = test.p - len(active)
    return RunMetrics(
        pred_loss=-2.0 * log_likelihood(theta, test),
        tp=tp,
        fp=fp,
        tpr=tp / len(active) if active else 0.0,
        fpr=fp / n_inactive if n_inactive else 0.0,
    )


@dataclass(frozen=True)
class RunRecord:
    run: int
    estimator: str
    k: int
    lam: float
    pred_loss: float
    tp: int
    fp: int
    tpr: float
    fpr: float
    error: Optional[str] = None


@dataclass
class StudyResult:
    spec_name: str
    p_tot: int
    pipeline: str
    selection: str
    records: list = field(default_factory=list)

    def summary(self) -> dict:
        """Median and quartiles of every metric, per estimator."""
        out = {}
        for est in sorted({r.estimator for r in self.records}):
            rows = [r for r in self.records if r.estimator == est and r.error is None]
            entry = {"n_ok": len(rows),
                     "n_failed": sum(1 for r in self.records if r.estimator == est and r.error)}
            for key in ("pred_loss", "tp", "fp", "tpr", "fpr", "k"):
                vals = np.array([getattr(r, key) for r in rows], dtype=float)
                if vals.size:
                    q1, med, q3 = np.percentile(vals, [25, 50, 75])
                else:
                    q1 = med = q3 = math.nan
                entry[key] = {"median": float(med), "q1": float(q1), "q3": float(q3)}
            out[est] = entry
        return out

    def rows(self) -> list:
        return [asdict(r) for r in self.records]


def _validation_pick(fits, lambdas, val: Dataset):
    best = None
    for lam, fit in zip(lambdas, fits):
        if isinstance(fit, Exception):
            continue
        loss = -2.0 * log_likelihood(fit.theta, val)
        # ties toward larger lambda
        if best is None or loss < best[0] or (loss == best[0] and lam > best[1]):
            best = (loss, lam, fit)
    if best is None:
        raise RuntimeError("every fit on the lambda grid failed")
    return best[2], best[1]


def _one_run(args):
    spec, run, seeds, pipeline, selection, gamma, n_lambda, opts, folds, k_range = args
    train, _, _ = generate(spec, seeds[0])
    val, _, _ = generate(spec, seeds[1])
    test, _, _ = generate(spec, seeds[2])
    opts = opts.replace(seed=int(seeds[3].generate_state(1)[0]))
    active = spec.active()
    records = []

    def record(estimator, fit, lam):
        m = evaluate(fit, active, test)
        records.append(RunRecord(run, estimator, fit.k, float(lam), m.pred_loss, m.tp, m.fp,
                                 m.tpr, m.fpr))

    try:
        if selection == "validation":
            k = k_range[0]
            grid = lambda_grid(train, n_lambda)
            fit, lam = _validation_pick(fit_path(train, k, grid, gamma, opts), grid, val)
        else:
            res = select(train, k_range, None, [gamma], selection, opts, folds,
                         seed=int(seeds[3].generate_state(2)[1]), n_lambda=n_lambda)
            fit, lam = res.best_fit, res.best[1]
        record("lasso", fit, lam)
        if pipeline == "adaptive":
            k = fit.k
            weights = adaptive_weights(fit.theta)
            if selection == "validation":
                grid = lambda_grid(train, n_lambda, weights=np.min(weights, axis=0))
                afit, alam = _validation_pick(
                    fit_path(train, k, grid, gamma, opts, weights, init=fit.theta), grid, val)
            else:
                afit, ares = fit_adaptive(train, k, fit.theta, None, gamma, selection, opts,
                                          folds, n_lambda=n_lambda)
                alam = ares.best[1]
            record("adapt", afit, alam)
    except Exception as err:  # recorded, never dropped
        logger.warning("run %d failed: %s", run, err)
        names = ["lasso"] + (["adapt"] if pipeline == "adaptive" else [])
        done = {r.estimator for r in records}
        for est in names:
            if est not in done:
                records.append(RunRecord(run, est, 0, math.nan, math.nan, 0, 0, math.nan,
                                         math.nan, error=f"{type(err).__name__}: {err}"))
    return records


def run_study(spec: ModelSpec, n_runs: int, pipeline: str = "one-stage",
              selection: str = "validation", seed=0, gamma: float = 1.0,
              n_lambda: int = 20, opts: Optional[OptimOptions] = None, folds: int = 10,
              k_range=None, n_jobs: int = 1) -> StudyResult:
    """Repeated train / validation / test experiment.

    ``pipeline`` is ``one-stage`` or ``adaptive`` (the latter also reports the
    one-stage fit it starts from). ``selection`` is ``validation`` (lambda
    picked on a fresh validation set; k fixed to the truth), ``bic`` or ``cv``
    (tuning on the training set over ``k_range``).
    """
    if pipeline not in ("one-stage", "adaptive"):
        raise ValueError(f"unknown pipeline {pipeline!r}")
    if selection not in ("validation", "bic", "cv"):
        raise ValueError(f"unknown selection {selection!r}")
    opts = opts or OptimOptions()
    k_range = list(k_range) if k_range is not None else [spec.k]
    children = np.random.SeedSequence(seed).spawn(n_runs)
    jobs = [(spec, i, c.spawn(4), pipeline, selection, gamma, n_lambda, opts, folds, k_range)
            for i, c in enumerate(children)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_one_run, jobs))
    else:
        results = [_one_run(j) for j in jobs]
    study = StudyResult(spec.name, spec.p_tot, pipeline, selection)
    for recs in results:
        study.records.extend(recs)
    study.records.sort(key=lambda r: (r.run, r.estimator))
    return study


@dataclass(frozen=True)
class BenchRow:
    lam: float
    variant: str
    bic: float
    seconds: float
    n_iterations: int
    converged: bool
    stationarity_residual: float
    criterion: float


def active_set_benchmark(data: Dataset, k: int, lambdas, gamma: float = 1.0,
                         opts: Optional[OptimOptions] = None, reps: int = 3) -> list:
    """Wall time of the active-set fit against the all-coordinates fit.

    For every lambda both variants start from the same random initialisation
    (``opts.seed``); the ``full`` variant uses ``active_set_period=1``. The
    reported time is the median over ``reps`` repetitions.
    """
    from .gem import fit_bcd_gem
    from .model import PenaltySpec
    from .selection import bic

    if reps < 1:
        raise ValueError("reps must be >= 1")
    opts = opts or OptimOptions()
    variants = {"active": opts, "full": opts.replace(active_set_period=1)}
    rows = []
    for lam in lambdas:
        pen = PenaltySpec(float(lam), gamma)
        for name, o in variants.items():
            times = []
            fit = None
            for _ in range(reps):
                fit = fit_bcd_gem(data, k, pen, o)
                times.append(fit.elapsed)
            rows.append(BenchRow(float(lam), name, bic(fit, data), float(np.median(times)),
                                 fit.n_iterations, fit.converged, fit.stationarity_residual,
                                 fit.criterion))
    return rows
