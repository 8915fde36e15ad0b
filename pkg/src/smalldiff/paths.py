"""Noise-free trajectories and simulated discrete observations.

``solve_ode`` integrates the deterministic limit dX/dt = b(X, alpha) with
classical fourth-order Runge-Kutta.  ``simulate_sde`` runs Euler-Maruyama
on a refined grid and subsamples to the observation times, with all
Gaussian increments drawn from a counter-based stream so that identical
inputs give bit-identical paths.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng
from .models import ModelSpec

__all__ = [
    "PathError",
    "ParseError",
    "OdePath",
    "ObservationSet",
    "solve_ode",
    "simulate_sde",
    "save_observations",
    "load_observations",
]


class PathError(RuntimeError):
    """Numerical blow-up while integrating a trajectory."""


class ParseError(ValueError):
    """Malformed observation file; carries the offending line number."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclass(frozen=True)
class OdePath:
    """Solution of the noise-free limit ODE on a uniform grid."""

    grid: np.ndarray      # (m+1,)
    states: np.ndarray    # (m+1, d)
    alpha: np.ndarray

    def at_indices(self, idx) -> np.ndarray:
        return self.states[idx]


@dataclass(frozen=True)
class ObservationSet:
    """Discrete observations (t_k, X_{t_k}), k = 0..n, on a uniform grid."""

    times: np.ndarray     # (n+1,)
    values: np.ndarray    # (n+1, d)
    epsilon: float
    T: float
    seed: Optional[int] = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or v.ndim != 2 or v.shape[0] != t.shape[0]:
            raise ValueError("times and values must be (n+1,) and (n+1, d)")
        if t.shape[0] < 2:
            raise ValueError("need at least one observation interval")
        dt = np.diff(t)
        if not np.all(dt > 0):
            raise ValueError("observation times must be strictly increasing")
        if not np.allclose(dt, dt[0], rtol=1e-8, atol=1e-12):
            raise ValueError("observation times must be uniformly spaced")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.times.shape[0] - 1

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def h(self) -> float:
        return self.T / self.n


def solve_ode(model: ModelSpec, alpha, steps: int) -> OdePath:
    """Classical RK4 for the noise-free limit on ``steps`` uniform intervals."""
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h = model.T / steps
    grid = np.linspace(0.0, model.T, steps + 1)
    states = np.empty((steps + 1, model.d))
    x = model.x0.copy()
    states[0] = x
    b = model.drift
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(steps):
            k1 = b(x, alpha)
            k2 = b(x + 0.5 * h * k1, alpha)
            k3 = b(x + 0.5 * h * k2, alpha)
            k4 = b(x + h * k3, alpha)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise PathError(f"ODE solution non-finite at t={grid[i + 1]:.6g}")
            states[i + 1] = x
    return OdePath(grid=grid, states=states, alpha=alpha)


def simulate_sde(model: ModelSpec, alpha, beta=None, *, eps: float, n: int,
                 T: Optional[float] = None, refine: int = 10,
                 seed: int = 0, stream_id: int = 0) -> ObservationSet:
    """Euler-Maruyama observations with seeded, counter-based increments.

    The scheme runs on ``n * refine`` sub-steps and returns the n+1 states
    at the observation times.  ``beta`` defaults to ``alpha`` for
    shared-parameter models and to an empty vector when the model has no
    diffusion parameters.
    """
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    if beta is None:
        if model.shared_params:
            beta = alpha
        elif model.q == 0:
            beta = np.empty(0)
        else:
            raise ValueError("beta is required for this model")
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if refine < 1:
        raise ValueError("refine must be >= 1")
    T = model.T if T is None else float(T)
    m = n * refine
    h = T / m
    sqrt_h = np.sqrt(h)
    if eps > 0:
        dw = rng.standard_normals(seed, stream_id, (m, model.r)) * sqrt_h
    else:
        dw = np.zeros((m, model.r))
    values = np.empty((n + 1, model.d))
    x = model.x0.copy()
    values[0] = x
    b, s = model.drift, model.diffusion
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(m):
            x = x + h * b(x, alpha) + eps * (s(x, beta) @ dw[j])
            if not np.all(np.isfinite(x)):
                raise PathError(f"simulated path non-finite at sub-step {j + 1}")
            if (j + 1) % refine == 0:
                values[(j + 1) // refine] = x
    times = np.linspace(0.0, T, n + 1)
    return ObservationSet(times=times, values=values, epsilon=float(eps), T=T, seed=seed)


# ---------------------------------------------------------------------------
# Observation CSV: `# n=<n> T=<T> eps=<eps> d=<d> [seed=<s>]`, then a header
# row `t,x1,...,xd`, then n+1 full-precision data rows.
# ---------------------------------------------------------------------------

def save_observations(obs: ObservationSet, path) -> None:
    header = f"# n={obs.n} T={obs.T:.17g} eps={obs.epsilon:.17g} d={obs.d}"
    if obs.seed is not None:
        header += f" seed={obs.seed}"
    cols = ",".join(["t"] + [f"x{i + 1}" for i in range(obs.d)])
    buf = io.StringIO()
    buf.write(header + "\n")
    buf.write(cols + "\n")
    for t, row in zip(obs.times, obs.values):
        buf.write(",".join(f"{v:.17g}" for v in np.concatenate([[t], row])) + "\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_observations(path) -> ObservationSet:
    if not os.path.exists(path):
        raise ParseError(f"no such file: {path}")
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ParseError("missing metadata header starting with '#'", line=1)
    meta = {}
    for tok in lines[0].lstrip("#").split():
        if "=" not in tok:
            raise ParseError(f"malformed header token {tok!r}", line=1)
        k, v = tok.split("=", 1)
        meta[k] = v
    for key in ("n", "T", "eps", "d"):
        if key not in meta:
            raise ParseError(f"header missing required field {key!r}", line=1)
    try:
        n = int(meta["n"]); T = float(meta["T"]); eps = float(meta["eps"]); d = int(meta["d"])
        seed = int(meta["seed"]) if "seed" in meta else None
    except ValueError as exc:
        raise ParseError(f"bad header value: {exc}", line=1)
    if len(lines) < 2 or not lines[1].startswith("t,"):
        raise ParseError("missing column header row", line=2)
    rows = []
    for i, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != d + 1:
            raise ParseError(f"expected {d + 1} columns, found {len(parts)}", line=i)
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise ParseError("non-numeric value", line=i)
    if len(rows) != n + 1:
        raise ParseError(f"expected {n + 1} data rows, found {len(rows)}")
    arr = np.asarray(rows)
    try:
        return ObservationSet(times=arr[:, 0], values=arr[:, 1:], epsilon=eps, T=T, seed=seed)
    except ValueError as exc:
        raise ParseError(str(exc))
