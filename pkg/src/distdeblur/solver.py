"""Projected limited-memory BFGS with a Wolfe line search and a scalar lower bound.

The method follows the usual L-BFGS-B recipe: variables sitting on the bound
with a gradient pushing outward are frozen, the two-loop recursion builds a
quasi-Newton step on the remaining ones, and the line search runs along the
projected path ``P(x + t d)``. Every iterate is feasible and the objective
never increases.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg.blas import daxpy

__all__ = ["SolverConfig", "SolverReport", "minimize", "prox_local"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    memory: int = 5
    max_iter: int = 1000
    gtol: float = 1e-10  # on the projected gradient, relative to its initial sup norm
    c1: float = 1e-4
    c2: float = 0.9
    lower: float | None = 0.0
    max_evals_per_search: int = 20

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError(f"need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")
        if self.memory < 1:
            raise ValueError("memory must be at least 1")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")


@dataclass(frozen=True)
class SolverReport:
    iterations: int
    value: float
    pg_norm: float
    reason: str  # "converged" | "budget" | "stall"
    evaluations: int


def _dot(a, b) -> float:
    # numpy's own loop: order-stable across processes and threads, unlike BLAS ddot
    return float(np.einsum("i,i->", a.ravel(), b.ravel()))


def _two_loop(q, pairs, free=None):
    """Inverse-Hessian product; pairs are ``(s, y, 1/(s.y), y.y)`` of flat arrays.

    With a ``free`` mask the recursion is kept on the free variables, so stale
    components of variables that have since hit the bound do not leak in.
    """
    shape = q.shape
    q = q.ravel().copy()
    mask = None if free is None or free.all() else free.ravel()
    alphas = []
    # axpy is elementwise, so BLAS threading cannot change its rounding
    for s, y, rho, _ in reversed(pairs):
        a = rho * _dot(s, q)
        daxpy(y, q, a=-a)
        if mask is not None:
            q *= mask
        alphas.append(a)
    if pairs:
        _, _, rho, yy = pairs[-1]
        q *= 1.0 / (rho * yy)
    for (s, y, rho, _), a in zip(pairs, reversed(alphas)):
        b = rho * _dot(y, q)
        daxpy(s, q, a=a - b)
        if mask is not None:
            q *= mask
    return q.reshape(shape)


def _cubic_step(t0, f0, d0, t1, f1, d1):
    """Minimizer of the cubic matching value and slope at ``t0`` and ``t1``, or None."""
    if t1 == t0:
        return None
    e = d0 + d1 - 3.0 * (f0 - f1) / (t0 - t1)
    disc = e * e - d0 * d1
    if disc < 0:
        return None
    g = math.copysign(math.sqrt(disc), t1 - t0)
    denom = d1 - d0 + 2.0 * g
    if denom == 0:
        return None
    t = t1 - (t1 - t0) * (d1 + g - e) / denom
    return t if math.isfinite(t) else None


class _Projection:
    def __init__(self, lower):
        self.lower = lower

    def __call__(self, x):
        return x if self.lower is None else np.maximum(x, self.lower)

    def grad(self, x, g):
        if self.lower is None:
            return g
        return x - np.maximum(x - g, self.lower)

    def free(self, x, g):
        if self.lower is None:
            return None
        return ~((x <= self.lower) & (g > 0))


def minimize(fun, x0, config: SolverConfig = SolverConfig()):
    """Minimize ``fun`` (returning ``(value, gradient)``) from ``x0`` subject to ``x >= lower``.

    Returns ``(x, SolverReport)``. Line-search failure ends the run with reason
    ``"stall"`` rather than raising.
    """
    proj = _Projection(config.lower)
    x = proj(np.array(x0, dtype=np.float64))
    f, g = fun(x)
    if not np.isfinite(f):
        raise FloatingPointError("objective is not finite at the starting point")
    nfev = 1
    pairs = deque(maxlen=config.memory)
    pg = proj.grad(x, g)
    pg_norm = float(np.max(np.abs(pg))) if pg.size else 0.0
    pg0 = pg_norm
    reason = "budget"
    it = 0

    while True:
        if pg_norm <= config.gtol * pg0 or pg_norm == 0.0:
            reason = "converged"
            break
        if it >= config.max_iter:
            break

        free = proj.free(x, g)
        d = -_two_loop(g if free is None else g * free, list(pairs), free)
        if free is not None:
            d *= free
            d[(x <= config.lower) & (d < 0)] = 0.0
        gd = _dot(g, d)
        if not gd < 0:
            pairs.clear()
            d = -(g if free is None else g * free)
            if free is not None:
                d[(x <= config.lower) & (d < 0)] = 0.0
            gd = _dot(g, d)
            if not gd < 0:
                reason = "converged"
                break

        t_init = 1.0 if pairs else min(1.0, 1.0 / float(np.max(np.abs(d))))
        step = _line_search(fun, proj, x, f, g, d, gd, t_init, config)
        nfev += step[-1]
        if step[0] is None:
            reason = "stall"
            break
        x_new, f_new, g_new, _ = step

        s = (x_new - x).ravel()
        yv = (g_new - g).ravel()
        sy = _dot(s, yv)
        if sy > 0:
            yy = _dot(yv, yv)
            if sy > 1e-12 * math.sqrt(_dot(s, s) * yy):
                pairs.append((s, yv, 1.0 / sy, yy))
        x, f, g = x_new, f_new, g_new
        it += 1
        pg = proj.grad(x, g)
        pg_norm = float(np.max(np.abs(pg)))

    log.debug("minimize: %s after %d iterations, f=%.6g, |pg|=%.3g", reason, it, f, pg_norm)
    return x, SolverReport(it, float(f), pg_norm, reason, nfev)


def _breakpoint(x, d, lower) -> float:
    """Smallest ``t`` at which some coordinate of ``x + t d`` reaches ``lower``."""
    # masked ufuncs are slow; divide everywhere and let fmin skip the 0/0 entries
    down = np.negative(d)
    np.maximum(down, 0.0, out=down)
    down += 0.0  # -0.0 -> +0.0, so d >= 0 yields +inf or nan
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.subtract(x, lower)
        np.divide(r, down, out=r)
    t = float(np.fmin.reduce(r, axis=None))
    return math.inf if math.isnan(t) else t


def _line_search(fun, proj, x, f0, g0, d, gd, t, cfg):
    """Weak-Wolfe search along ``P(x + t d)``; returns ``(x, f, g, nfev)`` or ``(None, .., nfev)``."""
    lower = cfg.lower
    t_brk = math.inf if lower is None else _breakpoint(x, d, lower)

    lo_t, lo_f, lo_d = 0.0, f0, gd
    lo_pt = None
    prev_t, prev_d = 0.0, gd
    hi_t = math.inf
    hi_f = hi_d = None
    nfev = 0

    for _ in range(cfg.max_evals_per_search):
        xt = proj(x + t * d)
        ft, gt = fun(xt)
        nfev += 1
        # past the breakpoint, clipped coordinates no longer move
        d_eff = d * (xt > lower) if t > t_brk else d
        dt = _dot(gt, d_eff)
        # below the first breakpoint nothing is clipped and the path is the straight ray
        decrease = t * gd if t <= t_brk else min(_dot(g0, xt - x), 0.0)
        if not np.isfinite(ft) or ft > f0 + cfg.c1 * decrease or ft > f0:
            hi_t, hi_f, hi_d = t, ft, dt
        elif dt >= cfg.c2 * gd or t >= t_brk:
            refined = _quadratic_refine(fun, proj, x, d, f0, gd, t, ft, dt, t_brk)
            if refined is not None:
                nfev += 1
                if refined[1] <= ft:
                    return refined + (nfev,)
            return xt, ft, gt, nfev
        else:
            lo_t, lo_f, lo_d = t, ft, dt
            lo_pt = (xt, ft, gt)

        if math.isinf(hi_t):
            # extrapolate: secant on the slope, kept in [1.1 t, 100 t]
            t_new = t - dt * (t - prev_t) / (dt - prev_d) if dt > prev_d else 4.0 * t
            if not math.isfinite(t_new):
                t_new = 4.0 * t
            prev_t, prev_d = t, dt
            t = min(max(t_new, 1.1 * t), 100.0 * t)
            if lo_t < t_brk < t:
                t = t_brk
        else:
            width = hi_t - lo_t
            t_new = None
            if hi_f is not None and np.isfinite(hi_f):
                t_new = _cubic_step(lo_t, lo_f, lo_d, hi_t, hi_f, hi_d)
            if t_new is None or not (lo_t + 0.1 * width <= t_new <= hi_t - 0.1 * width):
                t_new = lo_t + 0.5 * width
            t = t_new
            if width <= 1e-16 * max(1.0, hi_t):
                break

    if lo_pt is not None:
        xt, ft, gt = lo_pt
        return xt, ft, gt, nfev
    return None, None, None, nfev


def _quadratic_refine(fun, proj, x, d, f0, gd, t, ft, dt, t_brk):
    """Jump to the exact line minimum when the slope data fit a parabola exactly.

    On quadratic objectives this restores exact line searches, and with them
    finite termination of the quasi-Newton iteration; otherwise it is a no-op.
    """
    if t > t_brk or abs(dt) <= 1e-3 * abs(gd) or dt <= gd:
        return None
    mismatch = abs((ft - f0) - 0.5 * t * (gd + dt))
    if mismatch > 1e-9 * (abs(ft - f0) + abs(t * gd)):
        return None
    t_star = t * gd / (gd - dt)
    if not (0 < t_star <= t_brk) or t_star == t:
        return None
    xs = proj(x + t_star * d)
    fs, gs = fun(xs)
    if not np.isfinite(fs):
        return None
    return xs, fs, gs


def prox_local(objective, u, alpha, budget, warm_start=None, config: SolverConfig = SolverConfig()):
    """Approximate ``argmin_w f(w) + 0.5 ||w - u||^2_alpha`` over ``w >= lower``.

    ``objective`` is a :class:`~distdeblur.objective.LocalObjective` without a
    proximal term; the run is capped at ``budget`` iterations and starts from
    ``warm_start`` (``u`` when omitted). Returns ``(w, SolverReport)``.
    """
    shifted = objective.with_prox(alpha, u)
    x0 = u if warm_start is None else warm_start
    return minimize(shifted.eval, x0, replace(config, max_iter=int(budget)))
