"""Staged (adaptive) parameter estimation.

Three families are provided, all alternating between drift and diffusion
parameters instead of one joint search:

* ``estimate_type1`` - drift first via the order-v residual objective in
  one shot, then diffusion, then an efficiency-restoring drift pass in the
  estimated metric.
* ``estimate_type2`` - the first drift pass is split into v stages of
  increasing expansion order, each freezing the correction term at the
  previous stage's estimate; then diffusion and the final weighted pass.
* ``estimate_lowrho`` - diffusion first from raw increments, then drift;
  appropriate when the diffusion rate sqrt(n) beats the drift rate 1/eps.

``estimate_special`` covers known-diffusion and shared-parameter models,
and ``estimate_auto`` dispatches on model traits.  A plain joint
minimization over (alpha, beta) is included as a comparison baseline only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .contrasts import ContrastContext
from .models import ModelSpec
from .optimizer import OptimOptions, OptimResult, minimize_box, multi_start
from .paths import ObservationSet

__all__ = [
    "approximation_degree",
    "StageResult",
    "Estimate",
    "SharedRegimeError",
    "estimate_type1",
    "estimate_type2",
    "estimate_lowrho",
    "estimate_special",
    "estimate_auto",
    "joint_baseline",
    "multistart_init",
]


class SharedRegimeError(RuntimeError):
    """Raised when a shared-parameter model sits in the balanced-rate regime
    where the staged estimators are invalid."""


def approximation_degree(rho: float) -> int:
    """Expansion order: smallest integer >= rho + 1/2."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    return int(math.ceil(rho + 0.5))


@dataclass
class StageResult:
    name: str
    params: np.ndarray
    value: float
    status: str
    iterations: int
    nfev: int


@dataclass
class Estimate:
    method: str                     # type1 | type2 | lowrho | joint
    mode: str                       # plain | sigma_known | shared_fast_drift | shared_fast_diffusion
    rho: Optional[float]
    order: int
    stages: list
    alpha_hat: Optional[np.ndarray]
    beta_hat: Optional[np.ndarray]
    notes: list = field(default_factory=list)

    def stage(self, name: str) -> StageResult:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(f"no stage named {name!r} in {self.method} estimate")

    def has_stage(self, name: str) -> bool:
        return any(s.name == name for s in self.stages)

    @property
    def theta_hat(self) -> np.ndarray:
        parts = [p for p in (self.alpha_hat, self.beta_hat) if p is not None and p.size]
        if not parts:
            raise ValueError("estimate carries no parameters")
        if self.mode.startswith("shared") or self.beta_hat is None:
            return parts[0]
        return np.concatenate(parts)


def _stage(name: str, result: OptimResult) -> StageResult:
    return StageResult(name=name, params=np.asarray(result.x, dtype=float),
                       value=float(result.fun), status=result.status,
                       iterations=result.iterations, nfev=result.nfev)


def _run_stage(name, f, box, x0, opts, stages):
    try:
        res = minimize_box(f, box, x0, opts)
    except Exception as exc:
        raise RuntimeError(f"stage {name!r} failed: {exc}") from exc
    stages.append(_stage(name, res))
    return res.x


def _split_init(model: ModelSpec, init):
    alpha0, beta0 = model.split_params(init)
    if not model.in_box(alpha=alpha0, beta=beta0):
        raise ValueError("initial parameters outside the box")
    return alpha0, beta0


def estimate_type1(obs: ObservationSet, model: ModelSpec, rho: float, init,
                   opts: Optional[OptimOptions] = None) -> Estimate:
    """Drift / diffusion / weighted-drift sequence (one-shot drift stage)."""
    if model.shared_params:
        raise ValueError("shared-parameter models need estimate_special")
    if model.q == 0:
        raise ValueError("models without diffusion parameters need estimate_special")
    v = approximation_degree(rho)
    ctx = ContrastContext(obs, model, v)
    alpha0, beta0 = _split_init(model, init)
    stages: list = []
    a1 = _run_stage("alpha_stage1", ctx.drift_ss, model.box_alpha, alpha0, opts, stages)
    bh = _run_stage("beta", lambda b: ctx.diffusion_qlik(b, a1),
                    model.box_beta, beta0, opts, stages)
    ah = _run_stage("alpha_final", lambda a: ctx.drift_weighted(a, bh),
                    model.box_alpha, a1, opts, stages)
    return Estimate(method="type1", mode="plain", rho=rho, order=v, stages=stages,
                    alpha_hat=ah, beta_hat=bh)


def _type2_drift_chain(ctx: ContrastContext, model: ModelSpec, v: int, alpha0,
                       opts, stages) -> np.ndarray:
    cur = _run_stage("alpha_stage1", lambda a: ctx.drift_stage(a, stage=1),
                     model.box_alpha, alpha0, opts, stages)
    for l in range(2, v + 1):
        frozen = cur
        cur = _run_stage(f"alpha_stage{l}",
                         lambda a, fr=frozen, st=l: ctx.drift_stage(a, fr, st),
                         model.box_alpha, cur, opts, stages)
    return cur


def estimate_type2(obs: ObservationSet, model: ModelSpec, rho: float, init,
                   opts: Optional[OptimOptions] = None) -> Estimate:
    """Split drift stages with frozen corrections, then diffusion, then the
    weighted final drift pass."""
    if model.shared_params:
        raise ValueError("shared-parameter models need estimate_special")
    if model.q == 0:
        raise ValueError("models without diffusion parameters need estimate_special")
    v = approximation_degree(rho)
    ctx = ContrastContext(obs, model, v)
    alpha0, beta0 = _split_init(model, init)
    stages: list = []
    av = _type2_drift_chain(ctx, model, v, alpha0, opts, stages)
    bh = _run_stage("beta", lambda b: ctx.diffusion_qlik(b, av),
                    model.box_beta, beta0, opts, stages)
    ah = _run_stage("alpha_final", lambda a: ctx.drift_stage_weighted(a, av, bh),
                    model.box_alpha, av, opts, stages)
    return Estimate(method="type2", mode="plain", rho=rho, order=v, stages=stages,
                    alpha_hat=ah, beta_hat=bh)


def estimate_lowrho(obs: ObservationSet, model: ModelSpec, init,
                    opts: Optional[OptimOptions] = None,
                    rho: Optional[float] = None) -> Estimate:
    """Diffusion-first sequence for the regime where eps^-1 / sqrt(n) -> 0.

    The regime assertion is the caller's; it is recorded, not verified.
    """
    if model.shared_params:
        raise ValueError("shared-parameter models need estimate_special")
    if model.q == 0:
        raise ValueError("models without diffusion parameters need estimate_special")
    ctx = ContrastContext(obs, model, 1)
    alpha0, beta0 = _split_init(model, init)
    stages: list = []
    notes: list = []
    if rho is not None and rho >= 0.5:
        notes.append(f"rho={rho} recorded but the diffusion-first method assumes rho < 1/2")
    # Detect a diffusion objective that ignores beta (e.g. fixed diffusion):
    probe = model.box_beta.mean(axis=1)
    vacuous = (ctx.increment_qlik(beta0) == ctx.increment_qlik(probe)
               and ctx.increment_qlik(beta0) == ctx.increment_qlik(model.box_beta[:, 0]))
    if vacuous:
        stages.append(StageResult("beta", np.asarray(beta0, dtype=float),
                                  ctx.increment_qlik(beta0), "constant-objective", 0, 3))
        bh = np.asarray(beta0, dtype=float)
        notes.append("diffusion objective constant in beta; kept the initial value")
    else:
        bh = _run_stage("beta", ctx.increment_qlik, model.box_beta, beta0, opts, stages)
    ah = _run_stage("alpha_final", lambda a: ctx.drift_weighted_order1(a, bh),
                    model.box_alpha, alpha0, opts, stages)
    return Estimate(method="lowrho", mode="plain", rho=rho, order=1, stages=stages,
                    alpha_hat=ah, beta_hat=bh, notes=notes)


def estimate_special(obs: ObservationSet, model: ModelSpec, mode: str, rho,
                     init, opts: Optional[OptimOptions] = None,
                     flavor: str = "type1", beta_known=None) -> Estimate:
    """Special-case sequences: known diffusion coefficient, or drift and
    diffusion sharing one parameter vector.

    ``shared_auto`` picks the fast-drift or fast-diffusion branch by
    comparing 1/eps with sqrt(n); the balanced case (within 10%) is
    rejected because no staged method is valid there.
    """
    if flavor not in ("type1", "type2"):
        raise ValueError("flavor must be type1 or type2")
    notes: list = []
    if mode == "shared_auto":
        ratio = (1.0 / obs.epsilon) / math.sqrt(obs.n)
        if 0.9 <= ratio <= 1.1:
            raise SharedRegimeError(
                "drift rate 1/eps and diffusion rate sqrt(n) are balanced "
                f"(ratio {ratio:.3f}); staged estimation is invalid here and a "
                "joint method over both parameter roles is required")
        mode = "shared_fast_drift" if ratio > 1.1 else "shared_fast_diffusion"
        notes.append(f"shared-parameter regime resolved to {mode} (rate ratio {ratio:.3g})")

    if mode == "sigma_known":
        if model.q != 0 and beta_known is None:
            raise ValueError("sigma_known needs q == 0 or an explicit beta_known")
        metric_beta = np.empty(0) if model.q == 0 else np.asarray(beta_known, dtype=float)
        v = approximation_degree(rho)
        ctx = ContrastContext(obs, model, v)
        alpha0 = np.asarray(init, dtype=float).reshape(-1)
        if alpha0.size != model.p or not model.in_box(alpha=alpha0):
            raise ValueError("initial drift parameters missing or outside the box")
        stages: list = []
        if flavor == "type1":
            ah = _run_stage("alpha_final", lambda a: ctx.drift_weighted(a, metric_beta),
                            model.box_alpha, alpha0, opts, stages)
        else:
            av = _type2_drift_chain(ctx, model, v, alpha0, opts, stages)
            ah = _run_stage("alpha_final",
                            lambda a: ctx.drift_stage_weighted(a, av, metric_beta),
                            model.box_alpha, av, opts, stages)
        return Estimate(method=flavor, mode="sigma_known", rho=rho, order=v,
                        stages=stages, alpha_hat=ah, beta_hat=None, notes=notes)

    if mode == "shared_fast_drift":
        if not model.shared_params:
            raise ValueError("shared_fast_drift requires a shared-parameter model")
        v = approximation_degree(rho)
        ctx = ContrastContext(obs, model, v)
        alpha0 = np.asarray(init, dtype=float).reshape(-1)
        if alpha0.size != model.p or not model.in_box(alpha=alpha0):
            raise ValueError("initial parameters missing or outside the box")
        stages = []
        if flavor == "type1":
            a1 = _run_stage("alpha_stage1", ctx.drift_ss, model.box_alpha,
                            alpha0, opts, stages)
            ah = _run_stage("alpha_final", lambda a: ctx.drift_weighted(a, a1),
                            model.box_alpha, a1, opts, stages)
        else:
            av = _type2_drift_chain(ctx, model, v, alpha0, opts, stages)
            ah = _run_stage("alpha_final", lambda a: ctx.drift_stage_weighted(a, av, av),
                            model.box_alpha, av, opts, stages)
        return Estimate(method=flavor, mode="shared_fast_drift", rho=rho, order=v,
                        stages=stages, alpha_hat=ah, beta_hat=None, notes=notes)

    if mode == "shared_fast_diffusion":
        if not model.shared_params:
            raise ValueError("shared_fast_diffusion requires a shared-parameter model")
        ctx = ContrastContext(obs, model, 1)
        beta0 = np.asarray(init, dtype=float).reshape(-1)
        if beta0.size != model.q or not model.in_box(beta=beta0):
            raise ValueError("initial parameters missing or outside the box")
        stages = []
        bh = _run_stage("beta", ctx.increment_qlik, model.box_beta, beta0, opts, stages)
        return Estimate(method=flavor, mode="shared_fast_diffusion", rho=rho, order=1,
                        stages=stages, alpha_hat=None, beta_hat=bh, notes=notes)

    raise ValueError(f"unknown special mode {mode!r}")


def joint_baseline(obs: ObservationSet, model: ModelSpec, rho: float, init,
                   opts: Optional[OptimOptions] = None) -> Estimate:
    """Single minimization over the full (alpha, beta) box.

    Comparison baseline for the simulation harness, not a supported
    estimation API.
    """
    if model.shared_params or model.q == 0:
        raise ValueError("joint baseline needs separate drift and diffusion parameters")
    v = approximation_degree(rho)
    ctx = ContrastContext(obs, model, v)
    alpha0, beta0 = _split_init(model, init)
    theta0 = np.concatenate([alpha0, beta0])
    box = np.vstack([model.box_alpha, model.box_beta])
    stages: list = []
    th = _run_stage("joint", ctx.joint_qlik_flat, box, theta0, opts, stages)
    return Estimate(method="joint", mode="plain", rho=rho, order=v, stages=stages,
                    alpha_hat=th[: model.p], beta_hat=th[model.p:])


def estimate_auto(obs: ObservationSet, model: ModelSpec, method: str, rho, init,
                  opts: Optional[OptimOptions] = None) -> Estimate:
    """Dispatch on model traits: plain models run the requested method,
    known-diffusion models run the drift-only variant, shared-parameter
    models run the regime-resolved branch."""
    if method == "joint":
        return joint_baseline(obs, model, rho, init, opts)
    if model.q == 0:
        if method == "lowrho":
            raise ValueError("diffusion-first method needs diffusion parameters")
        return estimate_special(obs, model, "sigma_known", rho, init, opts, flavor=method)
    if model.shared_params:
        if method == "lowrho":
            return estimate_special(obs, model, "shared_fast_diffusion", rho, init,
                                    opts, flavor="type1")
        return estimate_special(obs, model, "shared_auto", rho, init, opts, flavor=method)
    if method == "type1":
        return estimate_type1(obs, model, rho, init, opts)
    if method == "type2":
        return estimate_type2(obs, model, rho, init, opts)
    if method == "lowrho":
        return estimate_lowrho(obs, model, init, opts, rho=rho)
    raise ValueError(f"unknown method {method!r}")


def global_init(obs: ObservationSet, model: ModelSpec, rho, seed: int,
                stream_id: int = 0, popsize: int = 25,
                maxiter: int = 150) -> np.ndarray:
    """Population-based global search on the first-order drift stage
    objective, used to initialize heavily multimodal drift fits.

    Differential evolution over the drift box, seeded from the package
    stream scheme, so results are reproducible and replicate-independent.
    The best point found should be handed to the staged estimators as
    their starting value.
    """
    from numpy.random import Generator, Philox
    from scipy.optimize import differential_evolution

    ctx = ContrastContext(obs, model, approximation_degree(rho))
    key = (int(seed) & ((1 << 64) - 1)) | ((int(stream_id) & ((1 << 64) - 1)) << 64)
    gen = Generator(Philox(key=key))
    res = differential_evolution(lambda a: ctx.drift_stage(a, stage=1),
                                 [(lo, hi) for lo, hi in model.box_alpha],
                                 seed=gen, maxiter=maxiter, popsize=popsize,
                                 tol=1e-10, polish=True)
    return np.asarray(res.x, dtype=float)


def multistart_init(obs: ObservationSet, model: ModelSpec, method: str, rho,
                    n_starts: int, seed: int,
                    opts: Optional[OptimOptions] = None,
                    stream_id: Optional[int] = None) -> tuple[np.ndarray, OptimResult]:
    """Uniform multi-start on the first drift stage objective.

    Returns the best drift vector found; the remaining stages should be
    warm-started from it.
    """
    v = approximation_degree(rho)
    ctx = ContrastContext(obs, model, v)
    if method == "type1":
        f = ctx.drift_ss
    elif method == "type2":
        f = lambda a: ctx.drift_stage(a, stage=1)
    else:
        raise ValueError("multi-start initialization applies to type1/type2 only")
    kwargs = {} if stream_id is None else {"stream_id": stream_id}
    res = multi_start(f, model.box_alpha, n_starts, seed, opts, **kwargs)
    return np.asarray(res.x, dtype=float), res
