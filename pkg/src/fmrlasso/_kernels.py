"""Hot inner loops of the EM fit: coordinate sweep, E-step, pi line search.

Two implementations of every kernel live here. The numba versions are explicit
loops compiled with ``@njit``; the numpy versions vectorise what they can and
loop over coordinates in Python. Set ``FMRLASSO_DISABLE_NUMBA=1`` (or run without
numba installed) to route all solvers through the numpy path.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is optional
    numba = None

_FLAG = os.environ.get("FMRLASSO_DISABLE_NUMBA", "").strip().lower()
USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")
BACKEND = "numba" if USE_NUMBA else "numpy"

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _rho_update(sw_yy, sw_yf, n_r):
    # minimiser of -n_r log(rho) + 0.5 rho^2 sw_yy - rho sw_yf
    return (sw_yf + math.sqrt(sw_yf * sw_yf + 4.0 * sw_yy * n_r)) / (2.0 * sw_yy)


def _soft(s, thresh, col_sq):
    if s > thresh:
        return (thresh - s) / col_sq
    if s < -thresh:
        return -(thresh + s) / col_sq
    return 0.0


def component_sweep_numpy(X, y, w, phi, fitted, rho, n_r, thresholds, coords):
    """One rho update followed by one pass over ``coords``; numpy version.

    ``phi`` and ``fitted`` (= X @ phi) are updated in place. Returns the new rho.
    Coordinates whose weighted column norm vanishes are left untouched.
    """
    wy = w * y
    rho = _rho_update(float(wy @ y), float(wy @ fitted), n_r)
    # gradient carrier: w * (X phi - rho y)
    g = w * fitted - rho * wy
    for j in coords:
        t = thresholds[j]
        xj = X[:, j]
        col_sq = float((w * xj) @ xj)
        if col_sq <= 0.0:
            continue
        old = phi[j]
        s = float(xj @ g) - old * col_sq
        if math.isinf(t):
            new = 0.0
        else:
            new = _soft(s, t, col_sq)
        delta = new - old
        if delta != 0.0:
            phi[j] = new
            fitted += delta * xj
            g += (delta * w) * xj
    return rho


def _component_sweep_loops(X, y, w, phi, fitted, rho, n_r, thresholds, coords):
    n = X.shape[0]
    sw_yy = 0.0
    sw_yf = 0.0
    for i in range(n):
        wy = w[i] * y[i]
        sw_yy += wy * y[i]
        sw_yf += wy * fitted[i]
    rho = (sw_yf + math.sqrt(sw_yf * sw_yf + 4.0 * sw_yy * n_r)) / (2.0 * sw_yy)
    g = np.empty(n)
    for i in range(n):
        g[i] = w[i] * (fitted[i] - rho * y[i])
    for jj in range(coords.shape[0]):
        j = coords[jj]
        t = thresholds[j]
        col_sq = 0.0
        dot = 0.0
        for i in range(n):
            x = X[i, j]
            col_sq += w[i] * x * x
            dot += x * g[i]
        if col_sq <= 0.0:
            continue
        old = phi[j]
        s = dot - old * col_sq
        new = 0.0
        if not math.isinf(t):
            if s > t:
                new = (t - s) / col_sq
            elif s < -t:
                new = -(t + s) / col_sq
        delta = new - old
        if delta != 0.0:
            phi[j] = new
            for i in range(n):
                x = X[i, j]
                fitted[i] += delta * x
                g[i] += delta * w[i] * x
    return rho


def _component_thresholds(nlam, pi_r, gamma, weights_r):
    # an infinite weight freezes the coordinate even when lambda = 0
    return np.where(np.isinf(weights_r), np.inf, nlam * pi_r**gamma * np.where(
        np.isinf(weights_r), 0.0, weights_r))


def components_sweep_numpy(X, y, resp, phi, fitted, rho, pi, weights, nlam, gamma, usable, full):
    """``component_sweep`` for every component in turn; numpy version.

    ``phi`` (k x p), ``fitted`` (k x n) and ``rho`` are updated in place. A full
    pass visits ``usable``; otherwise only the nonzero coordinates of each row.
    """
    for r in range(phi.shape[0]):
        w = np.ascontiguousarray(resp[:, r])
        coords = usable if full else np.flatnonzero(phi[r])
        thr = _component_thresholds(nlam, pi[r], gamma, weights[r])
        rho[r] = component_sweep_numpy(X, y, w, phi[r], fitted[r], rho[r], float(w.sum()),
                                       thr, coords)


def _components_sweep_loops(X, y, resp, phi, fitted, rho, pi, weights, nlam, gamma, usable,
                            full):
    k, p = phi.shape
    n = X.shape[0]
    w = np.empty(n)
    thr = np.empty(p)
    coords = np.empty(p, dtype=np.int64)
    for r in range(k):
        n_r = 0.0
        for i in range(n):
            w[i] = resp[i, r]
            n_r += w[i]
        scale = nlam * pi[r] ** gamma
        for j in range(p):
            if math.isinf(weights[r, j]):
                thr[j] = math.inf
            else:
                thr[j] = scale * weights[r, j]
        m = 0
        if full:
            for jj in range(usable.shape[0]):
                coords[m] = usable[jj]
                m += 1
        else:
            for j in range(p):
                if phi[r, j] != 0.0:
                    coords[m] = j
                    m += 1
        rho[r] = _component_sweep_loops(X, y, w, phi[r], fitted[r], rho[r], n_r, thr,
                                        coords[:m])


def _e_step_numpy(y, fitted_kn, rho, pi):
    resid = rho[:, None] * y[None, :] - fitted_kn
    terms = (np.log(pi) + np.log(rho))[:, None] - 0.5 * resid * resid - _LOG_SQRT_2PI
    top = terms.max(axis=0)
    e = np.exp(terms - top[None, :])
    tot = e.sum(axis=0)
    resp = (e / tot[None, :]).T
    resp /= resp.sum(axis=1)[:, None]
    return np.ascontiguousarray(resp), float(np.sum(top + np.log(tot)))


def _e_step_loops(y, fitted_kn, rho, pi):
    k, n = fitted_kn.shape
    resp = np.empty((n, k))
    base = np.empty(k)
    for r in range(k):
        base[r] = math.log(pi[r]) + math.log(rho[r]) - _LOG_SQRT_2PI
    loglik = 0.0
    for i in range(n):
        top = -np.inf
        for r in range(k):
            e = rho[r] * y[i] - fitted_kn[r, i]
            t = base[r] - 0.5 * e * e
            resp[i, r] = t
            if t > top:
                top = t
        tot = 0.0
        for r in range(k):
            v = math.exp(resp[i, r] - top)
            resp[i, r] = v
            tot += v
        loglik += top + math.log(tot)
        s = 0.0
        for r in range(k):
            resp[i, r] /= tot
            s += resp[i, r]
        for r in range(k):
            resp[i, r] /= s
    return resp, loglik


def _pi_objective(pi, pibar, l1, lam, gamma):
    return -float(pibar @ np.log(pi)) + lam * float(np.sum(pi**gamma * l1))


def _pi_line_search_numpy(pi, pibar, l1, lam, gamma, delta, max_steps):
    f0 = _pi_objective(pi, pibar, l1, lam, gamma)
    t = 1.0
    for _ in range(max_steps + 1):
        cand = pi + t * (pibar - pi)
        cand = cand / cand.sum()
        if np.all(cand > 0) and _pi_objective(cand, pibar, l1, lam, gamma) <= f0:
            return cand
        t *= delta
    return pi.copy()


def _pi_line_search_loops(pi, pibar, l1, lam, gamma, delta, max_steps):
    k = pi.shape[0]
    f0 = 0.0
    for r in range(k):
        f0 += -pibar[r] * math.log(pi[r]) + lam * pi[r] ** gamma * l1[r]
    cand = np.empty(k)
    t = 1.0
    for _ in range(max_steps + 1):
        tot = 0.0
        for r in range(k):
            cand[r] = pi[r] + t * (pibar[r] - pi[r])
            tot += cand[r]
        ok = True
        f = 0.0
        for r in range(k):
            cand[r] /= tot
            if cand[r] <= 0.0:
                ok = False
                break
            f += -pibar[r] * math.log(cand[r]) + lam * cand[r] ** gamma * l1[r]
        if ok and f <= f0:
            return cand
        t *= delta
    return pi.copy()


def relative_change_numpy(new, old):
    return float(np.max(np.abs(new - old) / (1.0 + np.abs(new))))


def _relative_change_loops(new, old):
    out = 0.0
    for i in range(new.shape[0]):
        v = abs(new[i] - old[i]) / (1.0 + abs(new[i]))
        if v > out:
            out = v
    return out


def row_l1_numpy(phi, finite_weights):
    return np.einsum("rj,rj->r", np.abs(phi), finite_weights)


def _row_l1_loops(phi, finite_weights):
    k, p = phi.shape
    out = np.zeros(k)
    for r in range(k):
        acc = 0.0
        for j in range(p):
            if phi[r, j] != 0.0:
                acc += finite_weights[r, j] * abs(phi[r, j])
        out[r] = acc
    return out


if numba is not None:
    component_sweep_numba = numba.njit(cache=True)(_component_sweep_loops)
    e_step_numba = numba.njit(cache=True)(_e_step_loops)
    pi_line_search_numba = numba.njit(cache=True)(_pi_line_search_loops)
    _component_sweep_loops = component_sweep_numba
    components_sweep_numba = numba.njit(cache=True)(_components_sweep_loops)
    relative_change_numba = numba.njit(cache=True)(_relative_change_loops)
    row_l1_numba = numba.njit(cache=True)(_row_l1_loops)
else:  # pragma: no cover
    component_sweep_numba = e_step_numba = pi_line_search_numba = None
    components_sweep_numba = relative_change_numba = row_l1_numba = None

e_step_numpy = _e_step_numpy
pi_line_search_numpy = _pi_line_search_numpy

if USE_NUMBA:
    _sweep_impl = component_sweep_numba
    _sweeps_impl = components_sweep_numba
    relative_change = relative_change_numba
    row_l1 = row_l1_numba
    _e_step_impl = e_step_numba
    _pi_impl = pi_line_search_numba
else:
    _sweep_impl = component_sweep_numpy
    _sweeps_impl = components_sweep_numpy
    relative_change = relative_change_numpy
    row_l1 = row_l1_numpy
    _e_step_impl = e_step_numpy
    _pi_impl = pi_line_search_numpy


def component_sweep(X, y, w, phi, fitted, rho, n_r, thresholds, coords):
    """Dispatch to the active backend. ``X`` should be Fortran-ordered."""
    return _sweep_impl(X, y, w, phi, fitted, float(rho), float(n_r), thresholds,
                       np.ascontiguousarray(coords, dtype=np.int64))


def components_sweep(X, y, resp, phi, fitted, rho, pi, weights, nlam, gamma, usable, full):
    """One rho update and coordinate pass per component, in place. ``X`` Fortran-ordered."""
    _sweeps_impl(X, y, resp, phi, fitted, rho, pi, weights, float(nlam), float(gamma),
                 usable, bool(full))


def e_step(y, fitted_kn, rho, pi):
    """Responsibilities (n x k) and the log-likelihood, from fitted values X @ phi_r (k x n)."""
    return _e_step_impl(y, np.ascontiguousarray(fitted_kn), rho, pi)


def pi_line_search(pi, pibar, l1, lam, gamma, delta, max_steps):
    """First t in 1, delta, delta**2, ... for which the pi objective does not increase."""
    return _pi_impl(pi, pibar, l1, float(lam), float(gamma), float(delta), int(max_steps))
