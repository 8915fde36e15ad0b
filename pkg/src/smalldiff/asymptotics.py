"""Limit objects along the noise-free trajectory.

Computes the information / Gram matrices that govern the estimators'
limiting covariances, the implied standard deviations at finite (eps, n),
and the limiting separation functionals used for power diagnostics.  All
integrals are quadratures along the RK4 solution of the noise-free ODE.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .models import ModelSpec
from .optimizer import OptimOptions, minimize_box
from .paths import solve_ode

__all__ = [
    "InfoMatrices",
    "SingularInfoError",
    "info_matrices",
    "asymptotic_cov",
    "theoretical_sd",
    "limit_contrasts",
    "null_optimal_params",
]

_FD_STEP = float(np.finfo(float).eps) ** (1.0 / 3.0)
_MIN_SV = 1e-10


class SingularInfoError(np.linalg.LinAlgError):
    """An information block violates the regularity (non-singularity)
    condition required for the limiting covariances."""


@dataclass(frozen=True)
class InfoMatrices:
    """Quadrature information/Gram matrices at a parameter point.

    ``drift_fisher`` weighs drift-parameter gradients by the inverse
    diffusion covariance, ``drift_gram`` is unweighted, and
    ``drift_noise_gram`` weighs by the covariance itself;
    ``diffusion_fisher`` is the trace-form diffusion information with its
    1/(2T) prefactor.  The full-parameter information is block diagonal:
    drift block ``drift_fisher``, diffusion block ``diffusion_fisher``.
    """

    drift_fisher: np.ndarray      # (p, p)
    diffusion_fisher: np.ndarray  # (q, q)
    drift_gram: np.ndarray        # (p, p)
    drift_noise_gram: np.ndarray  # (p, p)
    theta0: np.ndarray
    quad_steps: int
    rule: str


def _drift_param_grad(model: ModelSpec, states: np.ndarray, alpha) -> np.ndarray:
    """d b / d alpha_j at each state by central differences, (m, d, p)."""
    alpha = np.asarray(alpha, dtype=float)
    m = states.shape[0]
    out = np.empty((m, model.d, alpha.size))
    for j in range(alpha.size):
        h = _FD_STEP * max(1.0, abs(alpha[j]))
        ap = alpha.copy(); ap[j] += h
        am = alpha.copy(); am[j] -= h
        out[:, :, j] = (np.asarray(model.drift(states, ap)) -
                        np.asarray(model.drift(states, am))) / (2.0 * h)
    return out


def _cov_param_grad(model: ModelSpec, states: np.ndarray, beta) -> np.ndarray:
    """d (sigma sigma^T) / d beta_j at each state, (m, d, d, q)."""
    beta = np.asarray(beta, dtype=float)
    m = states.shape[0]
    out = np.empty((m, model.d, model.d, beta.size))
    for j in range(beta.size):
        h = _FD_STEP * max(1.0, abs(beta[j]))
        bp = beta.copy(); bp[j] += h
        bm = beta.copy(); bm[j] -= h
        out[:, :, :, j] = (model.covariance(states, bp) -
                           model.covariance(states, bm)) / (2.0 * h)
    return out


def _integrate(f: np.ndarray, h: float, rule: str) -> np.ndarray:
    """Composite quadrature of per-node values f with leading grid axis."""
    if rule == "trapezoid":
        return h * (0.5 * f[0] + f[1:-1].sum(axis=0) + 0.5 * f[-1])
    if rule == "left":
        return h * f[:-1].sum(axis=0)
    raise ValueError(f"unknown quadrature rule {rule!r}")


def _path_states(model: ModelSpec, alpha, quad_steps: int,
                 min_solver_steps: int = 2000) -> np.ndarray:
    """ODE states on the quad grid, solved on a refined grid for accuracy."""
    mult = max(1, -(-min_solver_steps // quad_steps))
    path = solve_ode(model, alpha, quad_steps * mult)
    return path.states[::mult]


def _inverse_covariances(model: ModelSpec, states, beta) -> tuple[np.ndarray, np.ndarray]:
    cov = model.covariance(states, beta)
    eigs = np.linalg.eigvalsh(cov)
    k = int(np.argmin(eigs[:, 0]))
    if eigs[k, 0] <= 0:
        raise SingularInfoError(
            f"diffusion covariance singular along the noise-free path at node {k} "
            f"(min eigenvalue {eigs[k, 0]:.3e})")
    return cov, np.linalg.inv(cov)


def info_matrices(model: ModelSpec, theta0, quad_steps: int = 2000,
                  rule: str = "trapezoid") -> InfoMatrices:
    """Quadrature of the four information/Gram integrands along the
    noise-free path on a uniform grid of ``quad_steps`` intervals."""
    theta0 = np.asarray(theta0, dtype=float).reshape(-1)
    alpha0, beta0 = model.split_params(theta0)
    states = _path_states(model, alpha0, quad_steps)
    h = model.T / quad_steps
    cov, cov_inv = _inverse_covariances(model, states, beta0)
    db = _drift_param_grad(model, states, alpha0)

    f_fisher = np.einsum("kdi,kde,kej->kij", db, cov_inv, db)
    f_gram = np.einsum("kdi,kdj->kij", db, db)
    f_noise = np.einsum("kdi,kde,kej->kij", db, cov, db)
    drift_fisher = _integrate(f_fisher, h, rule)
    drift_gram = _integrate(f_gram, h, rule)
    drift_noise = _integrate(f_noise, h, rule)

    if model.q > 0:
        ds = _cov_param_grad(model, states, beta0)
        m_blocks = np.einsum("kabi,kbc->kaci", ds, cov_inv)
        f_diff = np.einsum("kabi,kbaj->kij", m_blocks, m_blocks)
        diffusion_fisher = _integrate(f_diff, h, rule) / (2.0 * model.T)
    else:
        diffusion_fisher = np.zeros((0, 0))

    sym = lambda M: 0.5 * (M + M.T)
    return InfoMatrices(
        drift_fisher=sym(drift_fisher),
        diffusion_fisher=sym(diffusion_fisher),
        drift_gram=sym(drift_gram),
        drift_noise_gram=sym(drift_noise),
        theta0=theta0, quad_steps=quad_steps, rule=rule,
    )


def _checked_inverse(mat: np.ndarray, label: str) -> np.ndarray:
    if mat.size == 0:
        return mat
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv.min() <= _MIN_SV:
        raise SingularInfoError(
            f"{label} is singular (min singular value {sv.min():.3e}); the "
            "non-singularity regularity condition fails at this parameter")
    return np.linalg.inv(mat)


def asymptotic_cov(info: InfoMatrices, target: str = "final") -> np.ndarray:
    """Limiting covariance of the standardized estimates.

    ``final``: block diagonal with the inverse drift and diffusion
    information blocks (drift standardized by 1/eps, diffusion by sqrt(n)).
    ``stage1_drift``: sandwich covariance of the unweighted first drift
    stage.
    """
    if target == "final":
        ib = _checked_inverse(info.drift_fisher, "drift information matrix")
        if info.diffusion_fisher.size == 0:
            return ib
        isig = _checked_inverse(info.diffusion_fisher, "diffusion information matrix")
        p, q = ib.shape[0], isig.shape[0]
        out = np.zeros((p + q, p + q))
        out[:p, :p] = ib
        out[p:, p:] = isig
        return out
    if target == "stage1_drift":
        jb_inv = _checked_inverse(info.drift_gram, "drift Gram matrix")
        return jb_inv @ info.drift_noise_gram @ jb_inv
    raise ValueError(f"unknown covariance target {target!r}")


def theoretical_sd(model: ModelSpec, theta0, eps: float, n: int,
                   grid_matched: bool = True,
                   quad_steps: int = 2000) -> dict:
    """Per-coordinate limiting standard deviations at finite (eps, n).

    With ``grid_matched`` the drift information is the left-endpoint sum on
    the n-point observation grid with an n/(n-1) variance adjustment, which
    is the convention behind the reference simulation tables; otherwise the
    fine-quadrature limit is used directly.
    """
    if grid_matched:
        info = info_matrices(model, theta0, quad_steps=n, rule="left")
        adjust = n / (n - 1.0) if n > 1 else 1.0
    else:
        info = info_matrices(model, theta0, quad_steps=quad_steps, rule="trapezoid")
        adjust = 1.0
    ib_inv = _checked_inverse(info.drift_fisher, "drift information matrix")
    sd_alpha = eps * np.sqrt(np.diag(ib_inv) * adjust)
    if info.diffusion_fisher.size:
        isig_inv = _checked_inverse(info.diffusion_fisher, "diffusion information matrix")
        sd_beta = np.sqrt(np.diag(isig_inv) / n)
    else:
        sd_beta = np.empty(0)
    return {"alpha": sd_alpha, "beta": sd_beta}


def limit_contrasts(model: ModelSpec, theta0, alpha=None, beta=None,
                    quad_steps: int = 2000) -> dict:
    """Limiting separation functionals at probe parameters.

    ``drift`` integrates the squared drift difference along the path,
    ``diffusion`` the log-det/trace divergence of the covariances
    (time-averaged), and ``drift_weighted`` the drift difference in the
    true inverse-covariance metric.  All vanish at the true parameter.
    """
    theta0 = np.asarray(theta0, dtype=float).reshape(-1)
    alpha0, beta0 = model.split_params(theta0)
    states = _path_states(model, alpha0, quad_steps)
    h = model.T / quad_steps
    out: dict = {}
    b0 = np.asarray(model.drift(states, alpha0), dtype=float)
    if alpha is not None:
        alpha = np.asarray(alpha, dtype=float).reshape(-1)
        diff = b0 - np.asarray(model.drift(states, alpha), dtype=float)
        out["drift"] = float(_integrate(np.einsum("kd,kd->k", diff, diff), h, "trapezoid"))
        _, cov_inv = _inverse_covariances(model, states, beta0)
        out["drift_weighted"] = float(_integrate(
            np.einsum("kd,kde,ke->k", diff, cov_inv, diff), h, "trapezoid"))
    if beta is not None and model.q > 0:
        beta = np.asarray(beta, dtype=float).reshape(-1)
        cov0, cov0_inv = _inverse_covariances(model, states, beta0)
        cov_b, cov_b_inv = _inverse_covariances(model, states, beta)
        ratio = np.einsum("kab,kbc->kac", cov_b, cov0_inv)
        sign, logdet = np.linalg.slogdet(ratio)
        if np.any(sign <= 0):
            raise SingularInfoError("covariance ratio lost positivity at a probe node")
        tr = np.einsum("kab,kba->k", cov_b_inv, cov0)
        vals = logdet + tr - model.d
        out["diffusion"] = float(_integrate(vals, h, "trapezoid")) / model.T
    return out


def null_optimal_params(model: ModelSpec, theta0, fixed_alpha=(), fixed_beta=(),
                        quad_steps: int = 500,
                        opts: Optional[OptimOptions] = None) -> dict:
    """Minimizers of the limiting separation functionals over restricted
    boxes with the given coordinates pinned; power diagnostics only."""
    theta0 = np.asarray(theta0, dtype=float).reshape(-1)
    alpha0, beta0 = model.split_params(theta0)
    states = _path_states(model, alpha0, quad_steps)
    h = model.T / quad_steps
    b0 = np.asarray(model.drift(states, alpha0), dtype=float)
    out: dict = {}

    def _pinned_min(objective, box, start, fixed):
        fixed = dict(fixed)
        dim = box.shape[0]
        free = [i for i in range(dim) if i not in fixed]
        full = np.array(start, dtype=float)
        for i, val in fixed.items():
            full[i] = val
        if not free:
            return full
        def g(z):
            x = full.copy()
            x[free] = z
            return objective(x)
        res = minimize_box(g, box[free], full[free], opts)
        full[free] = res.x
        return full

    def drift_sep(a):
        diff = b0 - np.asarray(model.drift(states, a), dtype=float)
        return float(_integrate(np.einsum("kd,kd->k", diff, diff), h, "trapezoid"))

    if model.p:
        out["alpha"] = _pinned_min(drift_sep, model.box_alpha, alpha0, fixed_alpha)

    if model.q:
        cov0, cov0_inv = _inverse_covariances(model, states, beta0)

        def diff_sep(b):
            cov_b, cov_b_inv = _inverse_covariances(model, states, b)
            sign, logdet = np.linalg.slogdet(
                np.einsum("kab,kbc->kac", cov_b, cov0_inv))
            if np.any(sign <= 0):
                raise SingularInfoError("covariance ratio lost positivity")
            tr = np.einsum("kab,kba->k", cov_b_inv, cov0)
            return float(_integrate(logdet + tr - model.d, h, "trapezoid")) / model.T

        out["beta"] = _pinned_min(diff_sep, model.box_beta, beta0, fixed_beta)
    return out
