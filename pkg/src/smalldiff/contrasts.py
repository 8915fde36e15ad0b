"""Stagewise objective functions for the adaptive estimation methods.

Every objective is a sum over observation steps built from the order-l
step residuals and, where a metric appears, the diffusion covariance
evaluated at the left endpoint of each step.  Frozen ("plugged-in")
parameters are cached by value inside a context so that re-evaluating an
objective while only the free parameter moves never recomputes them.
"""

from __future__ import annotations

import numpy as np

from .generator import drift_correction, step_residuals
from .models import ModelSpec
from .paths import ObservationSet

__all__ = ["ContrastError", "ContrastContext"]

MIN_EIGENVALUE = 1e-12


class ContrastError(RuntimeError):
    """Objective evaluation failed; message names the offending step."""


def _fingerprint(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=float).tobytes()


class ContrastContext:
    """Read-only evaluation context for one observation set.

    ``order`` is the residual expansion order used by the order-v
    objectives.  One context should back one optimizer run or one
    estimation sequence; contexts are cheap and never mutated by
    evaluation apart from internal value caches.
    """

    def __init__(self, obs: ObservationSet, model: ModelSpec, order: int):
        if order < 1:
            raise ValueError("order must be >= 1")
        if obs.d != model.d:
            raise ValueError("observation/model dimension mismatch")
        if obs.epsilon <= 0:
            raise ValueError("objectives need a positive dispersion coefficient")
        self.obs = obs
        self.model = model
        self.order = int(order)
        self.x_prev = obs.values[:-1]
        self.dx = np.diff(obs.values, axis=0)
        self.h = obs.h
        self.eps = obs.epsilon
        self.n = obs.n
        self.weight = 1.0 / (self.eps ** 2 * self.h)
        self._corr_cache: dict = {}
        self._resid_cache: dict = {}
        self._metric_cache: dict = {}

    # -- cached frozen-parameter pieces ------------------------------------

    def _correction(self, alpha_frozen, order: int) -> np.ndarray:
        if order == 1:
            return np.zeros_like(self.dx)
        alpha_frozen = np.asarray(alpha_frozen, dtype=float).reshape(-1)
        key = (order, _fingerprint(alpha_frozen))
        hit = self._corr_cache.get(key)
        if hit is None:
            hit = drift_correction(self.model, alpha_frozen, self.x_prev, order, self.h)
            self._corr_cache[key] = hit
        return hit

    def _frozen_residuals(self, alpha_frozen, order: int) -> np.ndarray:
        alpha_frozen = np.asarray(alpha_frozen, dtype=float).reshape(-1)
        key = (order, _fingerprint(alpha_frozen))
        hit = self._resid_cache.get(key)
        if hit is None:
            hit = step_residuals(self.obs, self.model, alpha_frozen, order).residual
            self._resid_cache[key] = hit
        return hit

    def _factor(self, cov: np.ndarray) -> tuple[np.ndarray, float]:
        """Cholesky factor and total log-determinant of per-step covariances."""
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            chol = None
        if chol is not None:
            piv = np.einsum("kii->ki", chol)
            if float((piv ** 2).min()) > MIN_EIGENVALUE:
                return chol, float(2.0 * np.log(piv).sum())
        eigs = np.linalg.eigvalsh(cov)
        k = int(np.argmin(eigs[:, 0]))
        raise ContrastError(
            f"diffusion covariance not positive definite at step {k + 1} "
            f"(min eigenvalue {eigs[k, 0]:.3e})"
        )

    def _metric(self, beta_frozen) -> np.ndarray:
        beta_frozen = np.asarray(beta_frozen, dtype=float).reshape(-1)
        key = _fingerprint(beta_frozen)
        hit = self._metric_cache.get(key)
        if hit is None:
            cov = self.model.covariance(self.x_prev, beta_frozen)
            hit, _ = self._factor(cov)
            self._metric_cache[key] = hit
        return hit

    @staticmethod
    def _quad(chol: np.ndarray, vec: np.ndarray) -> float:
        y = np.linalg.solve(chol, vec[..., None])[..., 0]
        return float(np.einsum("kd,kd->", y, y))

    def _residuals_at(self, alpha, order: int) -> np.ndarray:
        """Residuals at a varying parameter (no caching across candidates)."""
        alpha = np.asarray(alpha, dtype=float).reshape(-1)
        first = self.dx - self.h * np.asarray(self.model.drift(self.x_prev, alpha), dtype=float)
        if order > 1:
            first = first - drift_correction(self.model, alpha, self.x_prev, order, self.h)
        return first

    def _check_finite(self, value: float, label: str) -> float:
        if not np.isfinite(value):
            raise ContrastError(f"{label}: non-finite objective value")
        return value

    # -- drift-only objectives ---------------------------------------------

    def drift_ss(self, alpha) -> float:
        """Unweighted sum of squared order-v residuals (stage-1 objective
        of the one-shot drift method)."""
        res = self._residuals_at(alpha, self.order)
        if not np.all(np.isfinite(res)):
            k = int(np.argwhere(~np.isfinite(res).all(axis=1))[0, 0])
            raise ContrastError(f"non-finite residual at step {k + 1}")
        return self._check_finite(self.weight * float(np.einsum("kd,kd->", res, res)),
                                  "drift_ss")

    def drift_stage(self, alpha, alpha_frozen=None, stage: int = 1) -> float:
        """Stagewise drift objective: first-order residuals at the free
        parameter minus the order-``stage`` correction at the frozen one."""
        if stage < 1:
            raise ValueError("stage must be >= 1")
        if stage > 1 and alpha_frozen is None:
            raise ValueError("stages beyond the first need a frozen parameter")
        res = self._residuals_at(alpha, 1)
        if stage > 1:
            res = res - self._correction(alpha_frozen, stage)
        return self._check_finite(self.weight * float(np.einsum("kd,kd->", res, res)),
                                  "drift_stage")

    # -- metric-weighted drift objectives ------------------------------------

    def drift_weighted(self, alpha, beta_frozen) -> float:
        """Order-v residual quadratic form in the frozen inverse covariance."""
        res = self._residuals_at(alpha, self.order)
        chol = self._metric(beta_frozen)
        return self._check_finite(self.weight * self._quad(chol, res), "drift_weighted")

    def drift_stage_weighted(self, alpha, alpha_frozen, beta_frozen) -> float:
        """Final stagewise drift objective: frozen order-v correction and
        frozen metric, free first-order residuals."""
        res = self._residuals_at(alpha, 1) - self._correction(alpha_frozen, self.order)
        chol = self._metric(beta_frozen)
        return self._check_finite(self.weight * self._quad(chol, res),
                                  "drift_stage_weighted")

    def drift_weighted_order1(self, alpha, beta_frozen) -> float:
        """First-order residual quadratic form in the frozen metric (drift
        step of the diffusion-first method)."""
        res = self._residuals_at(alpha, 1)
        chol = self._metric(beta_frozen)
        return self._check_finite(self.weight * self._quad(chol, res),
                                  "drift_weighted_order1")

    # -- diffusion objectives -------------------------------------------------

    def _qlik(self, beta, vec: np.ndarray, label: str) -> float:
        beta = np.asarray(beta, dtype=float).reshape(-1)
        cov = self.model.covariance(self.x_prev, beta)
        if not np.all(np.isfinite(cov)):
            k = int(np.argwhere(~np.isfinite(cov).reshape(self.n, -1).all(axis=1))[0, 0])
            raise ContrastError(f"non-finite covariance at step {k + 1}")
        chol, logdet = self._factor(cov)
        return self._check_finite(logdet + self.weight * self._quad(chol, vec), label)

    def diffusion_qlik(self, beta, alpha_frozen) -> float:
        """Gaussian quasi-likelihood in the diffusion parameter with the
        drift plugged in: log-determinants plus weighted order-v residual
        quadratic forms."""
        vec = self._frozen_residuals(alpha_frozen, self.order)
        return self._qlik(beta, vec, "diffusion_qlik")

    def increment_qlik(self, beta) -> float:
        """Diffusion-first objective using raw increments instead of
        drift-corrected residuals."""
        return self._qlik(beta, self.dx, "increment_qlik")

    # -- joint baseline ---------------------------------------------------------

    def joint_qlik(self, alpha, beta) -> float:
        """Joint objective over (alpha, beta); comparison baseline only."""
        res = self._residuals_at(alpha, self.order)
        return self._qlik(beta, res, "joint_qlik")

    def joint_qlik_flat(self, theta) -> float:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        alpha, beta = self.model.split_params(theta)
        return self.joint_qlik(alpha, beta)
