from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional


@dataclass(frozen=True)
class OptimOptions:
    """Solver settings shared by the single-component and mixture fits.

    tau
        Stopping tolerance: the relative criterion change must fall below
        ``tau`` and the largest relative coordinate change below ``sqrt(tau)``.
    max_iter
        Cap on EM iterations (mixture) or coordinate sweeps (single component).
    delta
        Base of the step grid ``{1, delta, delta**2, ...}`` for the pi update.
    active_set_period
        Every iteration whose index is a multiple of this visits all
        coordinates; the others visit only the nonzero ones. 1 disables the
        active-set strategy.
    seed
        Seed of the random initial responsibilities.
    kkt_tol
        Target KKT residual of the single-component solver.
    n_starts
        Independent random initialisations; the lowest criterion is kept.
    stationarity_factor
        When set, convergence additionally requires that the last full EM
        cycle moved the parameters by at most ``stationarity_factor * tau``
        (relative coordinate change plus relative criterion decrease). The
        iterate that cycle started from is returned. ``None`` keeps only the
        two-part rule above.
    """

    tau: float = 1e-6
    max_iter: int = 10_000
    delta: float = 0.1
    active_set_period: int = 11
    seed: int = 0
    kkt_tol: float = 1e-6
    n_starts: int = 1
    stationarity_factor: Optional[float] = 10.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.active_set_period < 1:
            raise ValueError("active_set_period must be >= 1")
        if self.max_iter < 1 or self.n_starts < 1:
            raise ValueError("max_iter and n_starts must be >= 1")
        if self.stationarity_factor is not None and not self.stationarity_factor > 0:
            raise ValueError("stationarity_factor must be positive or None")
        if not self.kkt_tol > 0:
            raise ValueError("kkt_tol must be positive")

    def replace(self, **changes) -> "OptimOptions":
        return replace(self, **changes)
