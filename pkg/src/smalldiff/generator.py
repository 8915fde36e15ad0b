"""Higher-order one-step drift expansion terms.

On a step of size h the noise-free increment expands as
h*b + h^2/2! * (Db)b + h^3/3! * D((Db)b) b + ..., where each further term
applies the drift-directional derivative operator to the previous field.
This module evaluates those iterated fields, the order-l correction sum,
and the per-step residuals that every contrast consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import ModelSpec
from .paths import ObservationSet

__all__ = ["GeneratorError", "GeneratorTerms", "iterated_drift", "drift_correction",
           "step_residuals"]

_FD_STEP = float(np.finfo(float).eps) ** (1.0 / 3.0)

MAX_ORDER = 6  # cap on iterated applications; guards runaway recursion cost


class GeneratorError(RuntimeError):
    pass


def _fd_jacobian_apply(func, x, direction):
    """Directional derivative (J_x[func] @ direction) by central differences.

    ``x`` and ``direction`` have shape (m, d); the per-coordinate step is
    cbrt(machine eps) * max(1, |x_i|).
    """
    m, d = x.shape
    out = np.zeros_like(direction, dtype=float)
    for i in range(d):
        hi = _FD_STEP * np.maximum(1.0, np.abs(x[:, i]))
        xp = x.copy(); xp[:, i] += hi
        xm = x.copy(); xm[:, i] -= hi
        col = (func(xp) - func(xm)) / (2.0 * hi)[:, None]
        out += col * direction[:, i:i + 1]
    return out


def iterated_drift(model: ModelSpec, alpha, x, order: int) -> np.ndarray:
    """Apply the drift-directional derivative operator ``order`` times to b.

    Returns the field values at states ``x`` (shape (m, d) or (d,)).  The
    first application uses the model's analytic state Jacobian when
    available; deeper levels fall back to nested central differences.
    """
    if order < 0:
        raise ValueError("order must be >= 0")
    if order > MAX_ORDER:
        raise ValueError(f"order {order} exceeds cap {MAX_ORDER}")
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x[None, :] if single else x

    def field(level: int, states: np.ndarray) -> np.ndarray:
        if level == 0:
            return np.asarray(model.drift(states, alpha), dtype=float)
        bvals = np.asarray(model.drift(states, alpha), dtype=float)
        if level == 1 and model.drift_jacobian_x is not None:
            jac = np.asarray(model.drift_jacobian_x(states, alpha), dtype=float)
            return np.einsum("mij,mj->mi", jac, bvals)
        return _fd_jacobian_apply(lambda s: field(level - 1, s), states, bvals)

    out = field(order, pts)
    if not np.all(np.isfinite(out)):
        raise GeneratorError(f"non-finite iterated drift at order {order}")
    return out[0] if single else out


def drift_correction(model: ModelSpec, alpha, x, order: int, h: float) -> np.ndarray:
    """Order-l correction: sum_{j=1}^{l-1} h^{j+1}/(j+1)! times the j-fold
    iterated drift field at ``x``.  Zero for order 1 (empty sum)."""
    if order < 1:
        raise ValueError("order must be >= 1")
    x = np.asarray(x, dtype=float)
    shape = x.shape if x.ndim > 1 else (x.shape[-1],)
    total = np.zeros(shape)
    for j in range(1, order):
        coeff = h ** (j + 1) / math.factorial(j + 1)
        if coeff != 0.0:
            total = total + coeff * iterated_drift(model, alpha, x, j)
    return total


@dataclass(frozen=True)
class GeneratorTerms:
    """Per-step expansion pieces along an observed path.

    ``first_order[k-1]`` is the raw residual X_{t_k} - X_{t_{k-1}} - h b,
    ``correction[k-1]`` the order-l correction at the left state, and
    ``residual = first_order - correction``.
    """

    order: int
    h: float
    first_order: np.ndarray   # (n, d)
    correction: np.ndarray    # (n, d)
    residual: np.ndarray      # (n, d)


def step_residuals(obs: ObservationSet, model: ModelSpec, alpha,
                   order: int) -> GeneratorTerms:
    """One pass over the n steps producing order-``order`` residuals."""
    if order < 1:
        raise ValueError("order must be >= 1")
    if obs.d != model.d:
        raise ValueError(f"observation dimension {obs.d} != model dimension {model.d}")
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    x_prev = obs.values[:-1]
    dx = np.diff(obs.values, axis=0)
    h = obs.h
    first = dx - h * np.asarray(model.drift(x_prev, alpha), dtype=float)
    if order == 1:
        corr = np.zeros_like(first)
    else:
        corr = drift_correction(model, alpha, x_prev, order, h)
    return GeneratorTerms(order=order, h=h, first_order=first,
                          correction=corr, residual=first - corr)
