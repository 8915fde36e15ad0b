"""Box-constrained minimization used by every estimation stage.

A projected quasi-Newton method (L-BFGS-B) with central-difference
gradients does the work; a box-clipped Nelder-Mead pass takes over once
if the line search breaks down or the objective turns non-finite.  The
returned point is never worse than the starting point.  ``multi_start``
adds the uniform-draw initializer used for hard landscapes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize as _scipy_minimize

from . import rng

__all__ = ["OptimOptions", "OptimResult", "central_diff_grad", "minimize_box",
           "multi_start"]

_FD_STEP = float(np.finfo(float).eps) ** (1.0 / 3.0)
_PENALTY = 1e100


@dataclass(frozen=True)
class OptimOptions:
    max_iters: int = 500
    f_tol: float = 1e-10      # relative improvement stop
    x_tol: float = 1e-8       # simplex absolute stop
    fallback: bool = True     # allow the simplex rescue pass

    def __post_init__(self):
        if self.max_iters < 1 or self.f_tol <= 0 or self.x_tol <= 0:
            raise ValueError("tolerances must be positive and max_iters >= 1")


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    status: str               # converged | max-iters | fallback-used
    iterations: int
    nfev: int
    failed_starts: int = 0
    start_index: Optional[int] = None


class _Objective:
    """Wraps a raw objective: counts calls, tracks the best finite point,
    and converts evaluation failures into a large finite penalty."""

    def __init__(self, f: Callable[[np.ndarray], float]):
        self.f = f
        self.nfev = 0
        self.best_x: Optional[np.ndarray] = None
        self.best_f = np.inf

    def __call__(self, x: np.ndarray) -> float:
        self.nfev += 1
        try:
            v = float(self.f(np.asarray(x, dtype=float)))
        except (RuntimeError, FloatingPointError, OverflowError, np.linalg.LinAlgError):
            return _PENALTY
        if not np.isfinite(v):
            return _PENALTY
        if v < self.best_f:
            self.best_f = v
            self.best_x = np.array(x, dtype=float, copy=True)
        return v


def central_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                      box: Optional[np.ndarray] = None) -> np.ndarray:
    """Central-difference gradient with per-coordinate step
    cbrt(machine eps) * max(1, |x_i|); the stencil is clipped into the box,
    degrading to a one-sided secant at an active bound."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = _FD_STEP * max(1.0, abs(x[i]))
        lo = -np.inf if box is None else box[i, 0]
        hi = np.inf if box is None else box[i, 1]
        up = min(x[i] + h, hi)
        dn = max(x[i] - h, lo)
        if up <= dn:
            g[i] = 0.0
            continue
        xp = x.copy(); xp[i] = up
        xm = x.copy(); xm[i] = dn
        g[i] = (f(xp) - f(xm)) / (up - dn)
    return g


def _clip(x: np.ndarray, box: np.ndarray) -> np.ndarray:
    return np.clip(x, box[:, 0], box[:, 1])


def minimize_box(f: Callable[[np.ndarray], float], box, x_init,
                 opts: Optional[OptimOptions] = None) -> OptimResult:
    """Minimize ``f`` over a product of intervals starting inside the box."""
    opts = opts or OptimOptions()
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    x0 = np.asarray(x_init, dtype=float).reshape(-1)
    if x0.size != box.shape[0]:
        raise ValueError("x_init dimension does not match box")
    if np.any(x0 < box[:, 0]) or np.any(x0 > box[:, 1]):
        raise ValueError("x_init must lie inside the box")
    obj = _Objective(f)
    if x0.size == 0:
        f0 = obj(x0)
        if f0 >= _PENALTY:
            raise ValueError("objective not finite at x_init")
        return OptimResult(x=x0, fun=f0, status="converged", iterations=0, nfev=obj.nfev)
    f0 = obj(x0)
    if f0 >= _PENALTY:
        raise ValueError("objective not finite at x_init")

    bounds = [(lo, hi) for lo, hi in box]
    res = _scipy_minimize(
        obj, x0, method="L-BFGS-B", bounds=bounds,
        jac=lambda x: central_diff_grad(obj, x, box),
        options={"maxiter": opts.max_iters, "ftol": opts.f_tol, "gtol": 1e-12},
    )
    status = "converged" if res.success else "max-iters"
    iterations = int(res.nit)
    broke_down = (not res.success and res.status not in (0, 1)) or not np.isfinite(res.fun) \
        or res.fun >= _PENALTY / 2
    if broke_down and opts.fallback:
        start = obj.best_x if obj.best_x is not None else x0
        res_nm = _scipy_minimize(
            obj, _clip(start, box), method="Nelder-Mead", bounds=bounds,
            options={"maxiter": max(opts.max_iters * x0.size, 200),
                     "fatol": opts.f_tol, "xatol": opts.x_tol},
        )
        iterations += int(res_nm.nit)
        status = "fallback-used"

    # Best-seen guarantees the result is never worse than the start.
    if obj.best_x is not None and obj.best_f <= f0:
        x_best, f_best = obj.best_x, obj.best_f
    else:
        x_best, f_best = x0, f0
    return OptimResult(x=_clip(x_best, box), fun=float(f_best), status=status,
                       iterations=iterations, nfev=obj.nfev)


def multi_start(f: Callable[[np.ndarray], float], box, n_starts: int,
                seed: int, opts: Optional[OptimOptions] = None,
                stream_id: int = rng.MULTISTART_STREAM) -> OptimResult:
    """Run ``minimize_box`` from ``n_starts`` uniform points in the box and
    return the best result by objective value (ties broken by start index).
    Individual start failures are skipped and counted."""
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    u = rng.uniforms(seed, stream_id, (n_starts, box.shape[0]))
    points = box[:, 0] + u * (box[:, 1] - box[:, 0])
    best: Optional[OptimResult] = None
    failed = 0
    total_nfev = 0
    for idx in range(n_starts):
        try:
            r = minimize_box(f, box, points[idx], opts)
        except ValueError:
            failed += 1
            continue
        total_nfev += r.nfev
        if best is None or r.fun < best.fun:
            r.start_index = idx
            best = r
    if best is None:
        raise ValueError(f"all {n_starts} starts failed (objective never finite)")
    best.failed_starts = failed
    best.nfev = total_nfev
    return best
