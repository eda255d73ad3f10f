"""Smooth deblurring costs: weighted least squares + Huber on circular finite differences.

The local cost minimized by a worker is::

    0.5 * ||y_i - H_i x||^2_{w_i} + lam * huber(D x) + 0.5 * ||x - u_i||^2_{alpha_i}

Nonnegativity is not part of these functions; the solver handles it as a bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

__all__ = [
    "finite_diff",
    "finite_diff_adjoint",
    "huber_value",
    "huber_influence",
    "LocalObjective",
    "global_objective",
    "NumericError",
]


class NumericError(FloatingPointError):
    """Raised when an objective evaluation produces NaN or infinity."""


def finite_diff(x: np.ndarray) -> np.ndarray:
    """Circular forward differences, shape ``(2, H, W)``: horizontal then vertical."""
    d = np.empty((2,) + x.shape)
    np.subtract(x[:, 1:], x[:, :-1], out=d[0, :, :-1])
    np.subtract(x[:, :1], x[:, -1:], out=d[0, :, -1:])
    np.subtract(x[1:], x[:-1], out=d[1, :-1])
    np.subtract(x[:1], x[-1:], out=d[1, -1:])
    return d


def finite_diff_adjoint(g: np.ndarray) -> np.ndarray:
    a = np.empty(g.shape[1:])
    np.subtract(g[0][:, :-1], g[0][:, 1:], out=a[:, 1:])
    np.subtract(g[0][:, -1:], g[0][:, :1], out=a[:, :1])
    b = np.empty(g.shape[1:])
    np.subtract(g[1][:-1], g[1][1:], out=b[1:])
    np.subtract(g[1][-1:], g[1][:1], out=b[:1])
    return a + b


def _magnitude(g, isotropic):
    if not isotropic:
        return np.abs(g)
    t = g[0] * g[0]
    t += g[1] * g[1]
    return np.sqrt(t, out=t)


def _huber(g, delta, isotropic):
    t = _magnitude(g, isotropic)
    s = np.minimum(t, delta)
    # s (t - s/2) is t^2/2 below delta and delta (t - delta/2) above
    h = 0.5 * s
    np.subtract(t, h, out=h)
    h *= s
    value = float(np.sum(h))
    # min(t, delta) / t is exactly 1 wherever t <= delta
    big = t > delta
    np.divide(s, t, out=s, where=big)
    np.copyto(s, 1.0, where=~big)
    return value, s


def huber_value(g: np.ndarray, delta: float, isotropic: bool = True) -> float:
    """Sum of ``rho(t)``, ``rho = t^2/2`` for ``t <= delta`` else ``delta (t - delta/2)``.

    ``t`` is the per-pixel length of the (horizontal, vertical) difference vector,
    or each channel's absolute value when ``isotropic`` is False.
    """
    return _huber(g, delta, isotropic)[0]


def huber_influence(g: np.ndarray, delta: float, isotropic: bool = True) -> np.ndarray:
    """Gradient of :func:`huber_value` w.r.t. ``g``: ``g * min(1, delta / t)``."""
    return g * _huber(g, delta, isotropic)[1]


@numba.njit(cache=True)
def _huber_tv(x, delta, lam, isotropic, grad):
    """``huber(D x)``, adding ``lam * D^T psi(D x)`` into ``grad``; one fused pass.

    Same quantities as :func:`huber_value` / :func:`huber_influence` with
    :func:`finite_diff_adjoint`, which serve as its reference implementation.
    """
    h, w = x.shape
    total = 0.0
    for r in range(h):
        rn = r + 1 if r + 1 < h else 0
        for c in range(w):
            cn = c + 1 if c + 1 < w else 0
            gx = x[r, cn] - x[r, c]
            gy = x[rn, c] - x[r, c]
            if isotropic:
                t = math.sqrt(gx * gx + gy * gy)
                if t > delta:
                    total += delta * (t - 0.5 * delta)
                    k = delta / t
                    gx *= k
                    gy *= k
                else:
                    total += 0.5 * t * t
            else:
                ax = abs(gx)
                if ax > delta:
                    total += delta * (ax - 0.5 * delta)
                    gx = math.copysign(delta, gx)
                else:
                    total += 0.5 * ax * ax
                ay = abs(gy)
                if ay > delta:
                    total += delta * (ay - 0.5 * delta)
                    gy = math.copysign(delta, gy)
                else:
                    total += 0.5 * ay * ay
            gx *= lam
            gy *= lam
            # adjoint of a forward difference: -g at the pixel, +g at its successor
            grad[r, c] -= gx + gy
            grad[r, cn] += gx
            grad[rn, c] += gy
    return total


@numba.njit(cache=True)
def _prox_term(x, u, alpha, grad):
    """``0.5 ||x - u||^2_alpha``, adding ``alpha (x - u)`` into ``grad``."""
    h, w = x.shape
    total = 0.0
    for r in range(h):
        for c in range(w):
            ad = alpha[r, c] * (x[r, c] - u[r, c])
            total += ad * (x[r, c] - u[r, c])
            grad[r, c] += ad
    return 0.5 * total


def _data_and_prior(apply, adjoint, y, w, lam, delta, x, isotropic):
    resid = apply(x) - y
    wr = w * resid
    value = 0.5 * float(np.sum(wr * resid))
    grad = adjoint(wr)
    if lam:
        value += lam * _huber_tv(x, float(delta), float(lam), bool(isotropic), grad)
    return value, grad


def _check_finite(value, grad):
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        bad = np.argwhere(~np.isfinite(grad))
        where = tuple(int(v) for v in bad[0]) if len(bad) else "objective value"
        raise NumericError(f"non-finite objective evaluation at {where}")


@dataclass
class LocalObjective:
    """Cost of one block, optionally shifted by a proximal term around ``u``."""

    y: np.ndarray
    op: object  # LocalBlurOperator or anything with apply/adjoint
    data_weight: object = 1.0  # scalar or per-observed-pixel array, 1/sigma^2
    lam: float = 0.0
    delta: float = 100.0
    alpha: object = None  # scalar or per-estimate-pixel array; None disables the prox term
    u: np.ndarray | None = None
    isotropic: bool = True

    def __post_init__(self):
        if self.y.shape != self.op.observed_shape:
            raise ValueError(f"observed block {self.y.shape} != operator range {self.op.observed_shape}")
        if self.delta <= 0:
            raise ValueError("Huber threshold must be positive")
        if self.lam < 0:
            raise ValueError("regularization weight must be nonnegative")
        if np.any(np.asarray(self.data_weight) < 0):
            raise ValueError("data weights must be nonnegative")
        if self.alpha is not None and np.any(np.asarray(self.alpha) < 0):
            raise ValueError("proximal weights must be nonnegative")

    @property
    def shape(self):
        return self.op.estimate_shape

    def with_prox(self, alpha, u) -> "LocalObjective":
        return LocalObjective(self.y, self.op, self.data_weight, self.lam, self.delta,
                              alpha, u, self.isotropic)

    def fidelity(self, x: np.ndarray) -> float:
        """Unshifted cost ``f_i(x)`` (data + prior), without the proximal term."""
        r = self.op.apply(x) - self.y
        v = 0.5 * float(np.sum(self.data_weight * r * r))
        if self.lam:
            scratch = np.zeros(x.shape)
            v += self.lam * _huber_tv(x, float(self.delta), 0.0, bool(self.isotropic), scratch)
        return float(v)

    def eval(self, x: np.ndarray):
        """Value and gradient at ``x``."""
        if x.shape != self.shape:
            raise ValueError(f"expected block of shape {self.shape}, got {x.shape}")
        value, grad = _data_and_prior(self.op.apply, self.op.adjoint, self.y, self.data_weight,
                                      self.lam, self.delta, x, self.isotropic)
        if self.alpha is not None:
            alpha = np.broadcast_to(np.asarray(self.alpha, dtype=np.float64), x.shape)
            value += _prox_term(x, self.u, alpha, grad)
        _check_finite(value, grad)
        return value, grad

    __call__ = eval


def global_objective(y, op, lam, delta, x, data_weight=1.0, isotropic=True):
    """Whole-image cost ``0.5 ||y - H x||^2_W + lam * huber(D x)`` and its gradient."""
    if y.shape != op.observed_shape:
        raise ValueError(f"observed image {y.shape} != operator range {op.observed_shape}")
    if x.shape != op.estimate_shape:
        raise ValueError(f"expected estimate of shape {op.estimate_shape}, got {x.shape}")
    value, grad = _data_and_prior(op.apply, op.adjoint, y, data_weight, lam, delta, x, isotropic)
    _check_finite(value, grad)
    return value, grad
