"""Diffusion model definitions: the model container plus built-in models.

A model is a drift field ``b(x, alpha)`` and a diffusion field
``sigma(x, beta)`` for the small-noise SDE

    dX_t = b(X_t, alpha) dt + eps * sigma(X_t, beta) dW_t,   X_0 = x0,

on a fixed horizon ``[0, T]`` with box-constrained parameters.  Evaluators
are vectorized over a leading batch axis: drift maps ``(..., d) -> (..., d)``
and diffusion maps ``(..., d) -> (..., d, r)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ModelSpec",
    "ValidationReport",
    "make_builtin",
    "register_model",
    "available_models",
    "validate_model",
]


def _as_box(box) -> np.ndarray:
    arr = np.asarray(box, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("box must be a sequence of (lo, hi) pairs")
    if not np.all(arr[:, 0] < arr[:, 1]):
        raise ValueError("box intervals must satisfy lo < hi componentwise")
    return arr


@dataclass(frozen=True)
class ModelSpec:
    """Immutable model container.

    Evaluators must be pure functions (no hidden state) so that many
    replicate workers can share one instance.  ``drift_jacobian_x`` is the
    optional state-Jacobian of the drift, ``(..., d) -> (..., d, d)``; when
    absent, finite differences are used wherever a Jacobian is needed.
    When ``shared_params`` is set the drift and diffusion read the same
    parameter vector and ``p == q``.
    """

    name: str
    d: int
    r: int
    p: int
    q: int
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray, np.ndarray], np.ndarray]
    x0: np.ndarray
    T: float
    box_alpha: np.ndarray
    box_beta: np.ndarray
    drift_jacobian_x: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    shared_params: bool = False

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        object.__setattr__(self, "box_alpha", _as_box(self.box_alpha))
        object.__setattr__(self, "box_beta", _as_box(self.box_beta))
        if self.d <= 0 or self.r <= 0:
            raise ValueError("state and noise dimensions must be positive")
        if self.x0.shape != (self.d,):
            raise ValueError(f"x0 must have length d={self.d}")
        if self.box_alpha.shape[0] != self.p:
            raise ValueError("box_alpha must have one (lo, hi) pair per drift parameter")
        if self.box_beta.shape[0] != self.q:
            raise ValueError("box_beta must have one (lo, hi) pair per diffusion parameter")
        if self.shared_params and self.p != self.q:
            raise ValueError("shared-parameter models require p == q")
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        # Probe both evaluators once so shape bugs surface at construction.
        a_mid = self.box_alpha.mean(axis=1) if self.p else np.empty(0)
        b_mid = self.box_beta.mean(axis=1) if self.q else np.empty(0)
        bx = np.asarray(self.drift(self.x0, a_mid), dtype=float)
        if bx.shape != (self.d,):
            raise ValueError(f"drift output shape {bx.shape} != ({self.d},)")
        sx = np.asarray(self.diffusion(self.x0, b_mid), dtype=float)
        if sx.shape != (self.d, self.r):
            raise ValueError(f"diffusion output shape {sx.shape} != ({self.d}, {self.r})")

    def split_params(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Split a flat parameter vector into (alpha, beta).

        Shared-parameter models expect length p and return the same vector
        twice; otherwise length p + q.
        """
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if self.shared_params:
            if theta.size != self.p:
                raise ValueError(f"expected {self.p} shared parameters, got {theta.size}")
            return theta, theta
        if theta.size != self.p + self.q:
            raise ValueError(f"expected {self.p + self.q} parameters, got {theta.size}")
        return theta[: self.p], theta[self.p :]

    def covariance(self, x, beta) -> np.ndarray:
        """sigma sigma^T at states ``x``, shape (..., d, d)."""
        s = np.asarray(self.diffusion(x, beta), dtype=float)
        return s @ np.swapaxes(s, -1, -2)

    def in_box(self, alpha=None, beta=None) -> bool:
        ok = True
        if alpha is not None and self.p:
            a = np.asarray(alpha, dtype=float)
            ok &= bool(np.all(a >= self.box_alpha[:, 0]) and np.all(a <= self.box_alpha[:, 1]))
        if beta is not None and self.q:
            b = np.asarray(beta, dtype=float)
            ok &= bool(np.all(b >= self.box_beta[:, 0]) and np.all(b <= self.box_beta[:, 1]))
        return ok


# ---------------------------------------------------------------------------
# Built-in models
# ---------------------------------------------------------------------------

def _model1_drift(x, a):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack(
        [-a[0] * x1 + 2.0 * np.cos(1.0 + a[1] * x2),
         2.0 * np.sin(1.0 + a[2] * x1) - a[3] * x2],
        axis=-1,
    )


def _model1_drift_jac(x, a):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    z = np.zeros(np.broadcast(x1, x2).shape)
    row1 = np.stack([-a[0] + z, -2.0 * a[1] * np.sin(1.0 + a[1] * x2)], axis=-1)
    row2 = np.stack([2.0 * a[2] * np.cos(1.0 + a[2] * x1), -a[3] + z], axis=-1)
    return np.stack([row1, row2], axis=-2)


def _model1_diffusion(x, b):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    s11 = b[0] / (1.0 + x1 ** 2)
    s22 = b[1] / (1.0 + x2 ** 2)
    z = np.zeros_like(s11)
    row1 = np.stack([s11, z - 0.1], axis=-1)
    row2 = np.stack([z + 0.1, s22], axis=-1)
    return np.stack([row1, row2], axis=-2)


def _sir_drift(x, th):
    x = np.asarray(x, dtype=float)
    s, i = x[..., 0], x[..., 1]
    beta, gamma = th[0], th[1]
    return np.stack([-beta * s * i, beta * s * i - gamma * i], axis=-1)


def _sir_drift_jac(x, th):
    x = np.asarray(x, dtype=float)
    s, i = x[..., 0], x[..., 1]
    beta, gamma = th[0], th[1]
    row1 = np.stack([-beta * i, -beta * s], axis=-1)
    row2 = np.stack([beta * i, beta * s - gamma + np.zeros_like(s)], axis=-1)
    return np.stack([row1, row2], axis=-2)


def _sir_diffusion(x, th):
    # Radicands are clamped at zero: Euler paths can push S*I slightly
    # negative at the simulation resolution.
    x = np.asarray(x, dtype=float)
    s, i = x[..., 0], x[..., 1]
    beta, gamma = th[0], th[1]
    a = np.sqrt(np.maximum(beta * s * i, 0.0))
    c = np.sqrt(np.maximum(gamma * i, 0.0))
    z = np.zeros_like(a)
    row1 = np.stack([a, z], axis=-1)
    row2 = np.stack([-a, c], axis=-1)
    return np.stack([row1, row2], axis=-2)


def _model3_drift(x, a):
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack(
        [1.0 - a[0] * x1 - 5.0 * np.sin(a[1] * x2 ** 2),
         2.0 - a[2] * x2 - 5.0 * np.sin(a[3] * x3 ** 2),
         3.0 - a[4] * x3 - 5.0 * np.sin(a[5] * x1 ** 2)],
        axis=-1,
    )


def _model3_drift_jac(x, a):
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    z = np.zeros(np.broadcast(x1, x2).shape)
    row1 = np.stack([-a[0] + z, -10.0 * a[1] * x2 * np.cos(a[1] * x2 ** 2), z], axis=-1)
    row2 = np.stack([z, -a[2] + z, -10.0 * a[3] * x3 * np.cos(a[3] * x3 ** 2)], axis=-1)
    row3 = np.stack([-10.0 * a[5] * x1 * np.cos(a[5] * x1 ** 2), z, -a[4] + z], axis=-1)
    return np.stack([row1, row2, row3], axis=-2)


def _model3_diffusion(x, _b):
    x = np.asarray(x, dtype=float)
    eye = np.eye(3)
    return np.broadcast_to(eye, x.shape[:-1] + (3, 3)).copy()


def _build_model1(overrides):
    kw = dict(
        name="model1", d=2, r=2, p=4, q=2,
        drift=_model1_drift, diffusion=_model1_diffusion,
        drift_jacobian_x=_model1_drift_jac,
        x0=(1.0, 1.0), T=1.0,
        box_alpha=[(0.01, 50.0)] * 4, box_beta=[(0.01, 50.0)] * 2,
    )
    kw.update(overrides)
    return ModelSpec(**kw)


def _build_sir(overrides):
    kw = dict(
        name="sir", d=2, r=2, p=2, q=2,
        drift=_sir_drift, diffusion=_sir_diffusion,
        drift_jacobian_x=_sir_drift_jac,
        x0=(0.99999, 0.00001), T=12.0,
        box_alpha=[(0.01, 100.0)] * 2, box_beta=[(0.01, 100.0)] * 2,
        shared_params=True,
    )
    kw.update(overrides)
    return ModelSpec(**kw)


def _build_model3(overrides):
    kw = dict(
        name="model3", d=3, r=3, p=6, q=0,
        drift=_model3_drift, diffusion=_model3_diffusion,
        drift_jacobian_x=_model3_drift_jac,
        x0=(1.0, 1.0, 1.0), T=1.0,
        box_alpha=[(0.01, 30.0)] * 6, box_beta=[],
    )
    kw.update(overrides)
    return ModelSpec(**kw)


_REGISTRY: dict[str, Callable[[dict], ModelSpec]] = {
    "model1": _build_model1,
    "sir": _build_sir,
    "model3": _build_model3,
}

#: Default simulation settings per built-in: (true parameters, eps, n, T).
BUILTIN_DEFAULTS = {
    "model1": {"theta0": (3.0, 6.0, 5.0, 4.0, 1.0, 0.5), "eps": 0.01, "n": 1000, "T": 1.0},
    "sir": {"theta0": (1.2, 1.0), "eps": 1e-4, "n": 360, "T": 12.0},
    "model3": {"theta0": (3.0, 7.0, 2.0, 8.0, 1.0, 6.0), "eps": 0.001, "n": 100, "T": 1.0},
}


def register_model(name: str, factory: Callable[[dict], ModelSpec]) -> None:
    """Register a plug-in model factory under ``name``.

    The factory receives a dict of overrides (x0, T, boxes, ...) and must
    return a ModelSpec.  Built-in names cannot be replaced.
    """
    if name in ("model1", "sir", "model3"):
        raise ValueError(f"cannot replace built-in model {name!r}")
    _REGISTRY[name] = factory


def available_models() -> list[str]:
    return sorted(_REGISTRY)


def make_builtin(name: str, overrides: Optional[dict] = None) -> ModelSpec:
    """Construct a model by registry name with optional field overrides."""
    if name not in _REGISTRY:
        raise ValueError(f"unknown model {name!r}; known: {', '.join(available_models())}")
    ov = dict(overrides or {})
    for key in ("x0",):
        if key in ov:
            ov[key] = np.asarray(ov[key], dtype=float)
    return _REGISTRY[name](ov)


# ---------------------------------------------------------------------------
# Numeric validation (reports only, never aborts estimation)
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    model: str
    alpha_in_box: bool
    beta_in_box: bool
    probes: list = field(default_factory=list)  # (state, min_eig, finite_drift, finite_diffusion)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.warnings


def validate_model(model: ModelSpec, alpha, beta, probe_states: Sequence,
                   min_eig_tol: float = 1e-12) -> ValidationReport:
    """Numerically probe a model along candidate states.

    Checks that drift and diffusion are finite and that the diffusion
    covariance is positive definite (min eigenvalue above tolerance) at
    each probe state.  Produces warnings only.
    """
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    rep = ValidationReport(
        model=model.name,
        alpha_in_box=model.in_box(alpha=alpha),
        beta_in_box=model.in_box(beta=beta),
    )
    if not rep.alpha_in_box:
        rep.warnings.append("drift parameters outside box")
    if not rep.beta_in_box:
        rep.warnings.append("diffusion parameters outside box")
    for x in probe_states:
        x = np.asarray(x, dtype=float).reshape(-1)
        bx = np.asarray(model.drift(x, alpha), dtype=float)
        cov = model.covariance(x, beta)
        finite_b = bool(np.all(np.isfinite(bx)))
        finite_s = bool(np.all(np.isfinite(cov)))
        min_eig = float(np.linalg.eigvalsh(cov).min()) if finite_s else float("nan")
        rep.probes.append((x, min_eig, finite_b, finite_s))
        if not finite_b:
            rep.warnings.append(f"non-finite drift at state {x}")
        if not finite_s:
            rep.warnings.append(f"non-finite diffusion at state {x}")
        elif min_eig <= min_eig_tol:
            rep.warnings.append(
                f"diffusion covariance nearly singular at state {x} (min eig {min_eig:.3e})"
            )
    return rep
