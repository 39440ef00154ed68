"""Command-line front end: ``fmrlasso {fit,select,adapt,simulate,bench}``.

Every command writes one JSON document (to ``--output`` or stdout) carrying a
``version`` field. ``--tsv`` additionally writes a flat table for plotting.
Exit status is 0 when every requested fit converged, 1 when some fit did not,
and 2 on errors, in which case the JSON document holds an ``error`` object.

With ``--standardize`` each covariate is divided by its sample standard
deviation before fitting. The reported ``phi`` and ``rho`` then belong to the
standardised problem while ``beta`` is rescaled to the original covariates.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from ._kernels import BACKEND
from .gem import FitResult, fit_bcd_gem
from .model import BoundednessWarning, Dataset, MixtureParams, PenaltySpec
from .options import OptimOptions
from .selection import adaptive_weights, bic, fit_adaptive, lambda_grid, select
from .simulation import active_set_benchmark, generate, preset, run_study

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
THREADS_ENV = "FMRLASSO_THREADS"


class CsvError(ValueError):
    """Base class of the input-file errors; ``kind`` names the failure."""

    kind = "csv_error"

    def details(self) -> dict:
        return {}


class EmptyFileError(CsvError):
    kind = "empty_file"


class MissingColumnError(CsvError):
    kind = "missing_column"

    def __init__(self, column: str, available):
        self.column = column
        self.available = list(available)
        super().__init__(f"column {column!r} not found; available: {', '.join(self.available)}")

    def details(self):
        return {"column": self.column, "available": self.available}


class NonNumericCellError(CsvError):
    kind = "non_numeric_cell"

    def __init__(self, line: int, column: str, value: str):
        self.line = line
        self.column = column
        self.value = value
        super().__init__(f"line {line}, column {column!r}: {value!r} is not a number")

    def details(self):
        return {"line": self.line, "column": self.column, "value": self.value}


class NonFiniteRowError(CsvError):
    kind = "non_finite_rows"

    def __init__(self, lines):
        self.lines = list(lines)
        shown = ", ".join(str(v) for v in self.lines[:20])
        more = " ..." if len(self.lines) > 20 else ""
        super().__init__(f"non-finite values on line(s) {shown}{more}")

    def details(self):
        return {"lines": self.lines}


def load_csv(path, response_column: str) -> Dataset:
    """Read a header-first CSV file; ``response_column`` becomes y, the rest x in header order.

    Line numbers in errors count the header as line 1.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise EmptyFileError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(rows) == 1:
        raise EmptyFileError(f"{path} has a header but no data rows")
    if response_column not in header:
        raise MissingColumnError(response_column, header)
    values = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != len(header):
            raise CsvError(f"line {line} has {len(row)} fields, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise NonNumericCellError(line, header[j], cell) from None
    bad = np.flatnonzero(~np.all(np.isfinite(values), axis=1))
    if bad.size:
        raise NonFiniteRowError((bad + 2).tolist())
    yi = header.index(response_column)
    xcols = [j for j in range(len(header)) if j != yi]
    if not xcols:
        raise CsvError("no covariate columns besides the response")
    return Dataset(values[:, xcols], values[:, yi], tuple(header[j] for j in xcols))


def standardize(data: Dataset):
    """Divide every column by its sample standard deviation (columns with zero spread are kept)."""
    sd = data.x.std(axis=0, ddof=1) if data.n > 1 else np.ones(data.p)
    scale = np.where(sd > 0, sd, 1.0)
    return Dataset(data.x / scale, data.y, data.column_names), scale


def _num(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return [_num(x) for x in v.tolist()] if v.ndim == 1 else [_num(r) for r in v]
    if isinstance(v, dict):
        return {k: _num(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_num(x) for x in v]
    return v


def fit_to_dict(fit: FitResult, data: Dataset, scale: Optional[np.ndarray] = None) -> dict:
    """JSON-ready record of a fit; floats keep full precision (``repr`` round-trips)."""
    theta = fit.theta
    nat = theta.to_natural()
    beta = nat.beta if scale is None else nat.beta / scale[None, :]
    names = data.column_names
    return _num({
        "k": theta.k,
        "p": theta.p,
        "lambda": fit.penalty.lam,
        "gamma": fit.penalty.gamma,
        "weights": None if fit.penalty.weights is None else fit.penalty.weights,
        "phi": theta.phi,
        "rho": theta.rho,
        "pi": theta.pi,
        "beta": beta,
        "sigma": nat.sigma,
        "standardized": scale is not None,
        "column_scale": None if scale is None else scale,
        "columns": list(names),
        "active_set": [[r, j, names[j]] for r, j in sorted(fit.active_set.entries)],
        "criterion": fit.criterion,
        "criterion_trace": fit.criterion_trace,
        "bic": bic(fit, data),
        "n_iterations": fit.n_iterations,
        "converged": fit.converged,
        "stationarity_residual": fit.stationarity_residual,
        "stationarity_heuristic": fit.stationarity_heuristic,
        "elapsed_seconds": fit.elapsed,
    })


def fit_from_dict(d: dict) -> tuple[MixtureParams, PenaltySpec]:
    """Inverse of ``fit_to_dict`` for the parameters and penalty."""
    # non-finite values are stored as the strings "inf", "-inf", "nan"
    def arr(x):
        return np.array(x, dtype=object).astype(float)

    theta = MixtureParams(arr(d["phi"]), arr(d["rho"]), arr(d["pi"]))
    weights = None if d.get("weights") is None else arr(d["weights"])
    return theta, PenaltySpec(float(d["lambda"]), float(d["gamma"]), weights)


def load_fit_json(path) -> tuple[MixtureParams, PenaltySpec]:
    """Parameters and penalty of the fit stored by ``fmrlasso fit``."""
    doc = json.loads(Path(path).read_text())
    return fit_from_dict(doc["result"]["fit"] if "result" in doc else doc)


def _threads(arg: Optional[int]) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return 1


def _ints(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _opts(args) -> OptimOptions:
    return OptimOptions(tau=args.tau, max_iter=args.max_iter,
                        active_set_period=args.active_set_period, seed=args.seed,
                        n_starts=args.n_starts)


def _load(args):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", BoundednessWarning)
        data = load_csv(args.data, args.response)
    notes = [str(w.message) for w in caught if issubclass(w.category, BoundednessWarning)]
    for msg in notes:
        logger.warning(msg)
    scale = None
    if args.standardize:
        data, scale = standardize(data)
    return data, scale, notes


def _grid(args, data, weights=None):
    if args.lambdas:
        return _floats(args.lambdas)
    return lambda_grid(data, args.grid, ratio=args.grid_ratio, weights=weights)


def _write_tsv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (row[c] for c in columns)])


def cmd_fit(args):
    data, scale, notes = _load(args)
    pen = PenaltySpec(args.lam, args.gamma)
    fit = fit_bcd_gem(data, args.k, pen, _opts(args))
    if args.tsv:
        _write_tsv(args.tsv, [{"iteration": i, "criterion": float(c)}
                              for i, c in enumerate(fit.criterion_trace)],
                   ["iteration", "criterion"])
    return {"fit": fit_to_dict(fit, data, scale), "warnings": notes}, fit.converged


def _table_rows(result):
    return [_num(r.as_dict()) for r in result.table]


def cmd_select(args):
    data, scale, notes = _load(args)
    result = select(data, _ints(args.k_range), _grid(args, data), _floats(args.gammas),
                    args.criterion, _opts(args), args.folds, args.seed)
    rows = _table_rows(result)
    if args.tsv:
        _write_tsv(args.tsv, rows, list(rows[0].keys()))
    ok = all(r.converged for r in result.table if r.error is None)
    out = {"criterion": result.criterion_kind, "best": _num(list(result.best)), "table": rows,
           "best_fit": fit_to_dict(result.best_fit, data, scale), "warnings": notes}
    return out, ok


def cmd_adapt(args):
    data, scale, notes = _load(args)
    opts = _opts(args)
    first = select(data, _ints(args.k_range), _grid(args, data), [args.gamma], args.criterion,
                   opts, args.folds, args.seed)
    init = first.best_fit
    w = np.min(adaptive_weights(init.theta), axis=0)
    grid2 = None if args.lambdas else _grid(args, data, weights=w)
    fit, second = fit_adaptive(data, init.k, init.theta, grid2, args.gamma, args.criterion, opts,
                               args.folds, args.seed, n_lambda=args.grid)
    rows = _table_rows(second)
    if args.tsv:
        _write_tsv(args.tsv, rows, list(rows[0].keys()))
    ok = all(r.converged for r in first.table + second.table if r.error is None)
    out = {
        "initial": {"best": _num(list(first.best)), "table": _table_rows(first),
                    "fit": fit_to_dict(init, data, scale)},
        "adaptive": {"best": _num(list(second.best)), "table": rows,
                     "fit": fit_to_dict(fit, data, scale)},
        "warnings": notes,
    }
    return out, ok


def cmd_simulate(args):
    spec = preset(args.model, args.ptot)
    k_range = _ints(args.k_range) if args.k_range else None
    study = run_study(spec, args.runs, args.pipeline, args.selection, args.seed, args.gamma,
                      args.grid, _opts(args), args.folds, k_range, _threads(args.threads))
    rows = [_num(r) for r in study.rows()]
    if args.tsv:
        _write_tsv(args.tsv, rows, ["run", "estimator", "k", "lam", "pred_loss", "tp", "fp",
                                    "tpr", "fpr", "error"])
    out = {"model": spec.name, "n": spec.n, "p_tot": spec.p_tot, "pipeline": args.pipeline,
           "selection": args.selection, "runs": rows, "summary": _num(study.summary())}
    return out, all(r.error is None for r in study.records)


def cmd_bench(args):
    spec = preset(args.model, args.ptot)
    data, _, _ = generate(spec, args.seed, n=args.n)
    lambdas = _grid(args, data)
    rows = active_set_benchmark(data, spec.k, lambdas, args.gamma, _opts(args), args.reps)
    table = [_num({"lambda": r.lam, "variant": r.variant, "bic": r.bic, "seconds": r.seconds,
                   "em_iterations": r.n_iterations, "converged": r.converged,
                   "stationarity_residual": r.stationarity_residual,
                   "criterion": r.criterion}) for r in rows]
    if args.tsv:
        _write_tsv(args.tsv, table, list(table[0].keys()))
    out = {"model": spec.name, "n": data.n, "p_tot": spec.p_tot, "reps": args.reps,
           "table": table}
    return out, all(r.converged for r in rows)


def _add_optim(p):
    p.add_argument("--seed", type=int, default=0, help="single source of randomness")
    p.add_argument("--tau", type=float, default=1e-6, help="stopping tolerance")
    p.add_argument("--max-iter", type=int, default=10_000)
    p.add_argument("--active-set-period", type=int, default=11,
                   help="full sweep every this many EM iterations (1 = always)")
    p.add_argument("--n-starts", type=int, default=1, help="random initialisations per fit")
    p.add_argument("--output", "-o", help="JSON output file (default: stdout)")
    p.add_argument("--tsv", help="also write a tab-separated table for plotting")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker processes (default: ${THREADS_ENV} or 1)")


def _add_data(p):
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--response", required=True, help="name of the response column")
    p.add_argument("--standardize", action="store_true",
                   help="scale covariates to unit sample standard deviation")


def _add_grid(p):
    p.add_argument("--grid", type=int, default=20, help="number of lambda values")
    p.add_argument("--grid-ratio", type=float, default=0.01,
                   help="smallest lambda as a fraction of lambda_max (log grid)")
    p.add_argument("--lambdas", help="explicit comma-separated lambda values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmrlasso", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="one penalised fit")
    _add_data(p)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--gamma", type=float, default=1.0, choices=[0.0, 0.5, 1.0])
    _add_optim(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="grid search over k, lambda, gamma")
    _add_data(p)
    p.add_argument("--k-range", default="1,2,3")
    p.add_argument("--gammas", default="1")
    p.add_argument("--criterion", choices=["bic", "cv"], default="bic")
    p.add_argument("--folds", type=int, default=10)
    _add_grid(p)
    _add_optim(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("adapt", help="one-stage selection followed by the adaptive refit")
    _add_data(p)
    p.add_argument("--k-range", default="1,2,3")
    p.add_argument("--gamma", type=float, default=1.0, choices=[0.0, 0.5, 1.0])
    p.add_argument("--criterion", choices=["bic", "cv"], default="bic")
    p.add_argument("--folds", type=int, default=10)
    _add_grid(p)
    _add_optim(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("simulate", help="repeated simulation study")
    p.add_argument("--model", required=True,
                   help="M1..M5, M1_unbalanced or sparsity_series(i)")
    p.add_argument("--ptot", type=int, default=None, help="total number of covariates")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--pipeline", choices=["one-stage", "adaptive"], default="one-stage")
    p.add_argument("--selection", choices=["validation", "bic", "cv"], default="validation")
    p.add_argument("--k-range", default=None, help="k values for bic/cv tuning")
    p.add_argument("--gamma", type=float, default=1.0, choices=[0.0, 0.5, 1.0])
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--grid", type=int, default=20, help="number of lambda values")
    _add_optim(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="active-set against full coordinate sweeps")
    p.add_argument("--model", default="M1")
    p.add_argument("--ptot", type=int, default=1000)
    p.add_argument("--n", type=int, default=None, help="sample size (default: the model's)")
    p.add_argument("--gamma", type=float, default=1.0, choices=[0.0, 0.5, 1.0])
    p.add_argument("--reps", type=int, default=3, help="timing repetitions (median reported)")
    _add_grid(p)
    p.set_defaults(grid=8)
    _add_optim(p)
    p.set_defaults(func=cmd_bench)
    return parser


def _emit(doc, path):
    text = json.dumps(doc, indent=2)
    if path:
        Path(path).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    header = {"version": __version__, "format_version": FORMAT_VERSION,
              "command": args.command, "backend": BACKEND}
    try:
        result, ok = args.func(args)
    except Exception as err:
        error = {"type": type(err).__name__, "kind": getattr(err, "kind", "runtime_error"),
                 "message": str(err)}
        if isinstance(err, CsvError):
            error.update(err.details())
        _emit(dict(header, ok=False, error=error), args.output)
        logger.debug("command failed", exc_info=True)
        return 2
    _emit(dict(header, ok=ok, result=result), args.output)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
