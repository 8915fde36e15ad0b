"""Coordinate-fixing hypothesis tests built on the staged estimators.

A hypothesis pins a subset of drift and/or diffusion coordinates to fixed
values.  Each test statistic is the increase of a stage objective when its
minimization is repeated over the restricted box.  Null distributions:
the first-stage drift statistic follows the law of a quadratic form of a
correlated Gaussian vector (sampled by Monte Carlo); diffusion statistics
and the efficient-metric drift statistics are chi-squared.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import gammaincc, gammaincinv

from . import rng
from .asymptotics import InfoMatrices, info_matrices
from .contrasts import ContrastContext
from .estimators import Estimate, StageResult, estimate_auto
from .models import ModelSpec
from .optimizer import OptimOptions, minimize_box
from .paths import ObservationSet

__all__ = [
    "Hypothesis",
    "TestOutcome",
    "TestReport",
    "NullSpec",
    "chi2_quantile",
    "chi2_pvalue",
    "restriction_block",
    "mc_null_quantile",
    "restricted_estimate",
    "lr_statistic",
    "make_null_spec",
    "run_test",
    "four_way_case",
]

CLAMP_FLAG = 1e-6   # clamping beyond this is reported as suspicious


@dataclass(frozen=True)
class Hypothesis:
    """Coordinates pinned under the null: ``alpha_fixed`` and ``beta_fixed``
    are tuples of (0-based index, value)."""

    alpha_fixed: tuple = ()
    beta_fixed: tuple = ()

    def __post_init__(self):
        for name, pairs in (("alpha", self.alpha_fixed), ("beta", self.beta_fixed)):
            idx = [i for i, _ in pairs]
            if len(set(idx)) != len(idx):
                raise ValueError(f"duplicate fixed index in {name} hypothesis")
        object.__setattr__(self, "alpha_fixed",
                           tuple((int(i), float(v)) for i, v in self.alpha_fixed))
        object.__setattr__(self, "beta_fixed",
                           tuple((int(i), float(v)) for i, v in self.beta_fixed))

    @property
    def r(self) -> int:
        return len(self.alpha_fixed)

    @property
    def s(self) -> int:
        return len(self.beta_fixed)

    def validate(self, model: ModelSpec) -> None:
        for (pairs, box, dim, name) in (
                (self.alpha_fixed, model.box_alpha, model.p, "alpha"),
                (self.beta_fixed, model.box_beta, model.q, "beta")):
            for i, v in pairs:
                if not 0 <= i < dim:
                    raise ValueError(f"{name} index {i + 1} out of range 1..{dim}")
                if not box[i, 0] <= v <= box[i, 1]:
                    raise ValueError(f"{name}[{i + 1}]={v} outside the box")

    def project(self, vec: np.ndarray, which: str) -> np.ndarray:
        out = np.array(vec, dtype=float)
        for i, v in (self.alpha_fixed if which == "alpha" else self.beta_fixed):
            out[i] = v
        return out

    @classmethod
    def parse(cls, text: str) -> "Hypothesis":
        """Parse entries like ``alpha[1]=3.0, beta[2]=0.5`` (1-based)."""
        alpha, beta = [], []
        for raw in re.split(r"[,;]", text):
            raw = raw.strip()
            if not raw:
                continue
            m = re.fullmatch(r"(alpha|beta)\[(\d+)\]\s*=\s*([-+0-9.eE]+)", raw)
            if not m:
                raise ValueError(f"bad hypothesis entry {raw!r}; "
                                 "expected alpha[i]=value or beta[j]=value")
            which, idx, val = m.group(1), int(m.group(2)) - 1, float(m.group(3))
            (alpha if which == "alpha" else beta).append((idx, val))
        return cls(alpha_fixed=tuple(alpha), beta_fixed=tuple(beta))


# ---------------------------------------------------------------------------
# Null distributions
# ---------------------------------------------------------------------------

def chi2_quantile(dof: int, delta: float) -> float:
    """Upper-delta point of the chi-squared law via the inverse regularized
    incomplete gamma function."""
    if dof < 1:
        raise ValueError("dof must be >= 1")
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    return float(2.0 * gammaincinv(dof / 2.0, 1.0 - delta))


def chi2_pvalue(dof: int, x: float) -> float:
    return float(gammaincc(dof / 2.0, max(x, 0.0) / 2.0))


def restriction_block(mat: np.ndarray, fixed_idx) -> np.ndarray:
    """Projector-building block: zero on the fixed coordinates, the inverse
    of the free-free submatrix on the rest (indices mapped back in place).

    For any vector v vanishing on the fixed coordinates the returned G
    satisfies G @ mat @ v = v.
    """
    mat = np.asarray(mat, dtype=float)
    dim = mat.shape[0]
    fixed = sorted(set(int(i) for i in fixed_idx))
    if any(i < 0 or i >= dim for i in fixed):
        raise ValueError("fixed index out of range")
    free = [i for i in range(dim) if i not in fixed]
    G = np.zeros_like(mat)
    if free:
        sub = mat[np.ix_(free, free)]
        G[np.ix_(free, free)] = np.linalg.inv(sub)
    return G


@dataclass
class MCNull:
    samples: np.ndarray
    quantile: float
    level: float
    se: float


def mc_null_quantile(drift_gram: np.ndarray, noise_gram: np.ndarray, fixed_idx,
                     delta: float, mc_n: int = 200000, seed: int = 0,
                     stream_id: int = rng.NULL_MC_STREAM) -> MCNull:
    """Monte Carlo upper-delta point of the first-stage drift statistic's
    null law: the quadratic form z' (J^-1 - G) z with z drawn N(0, K),
    J the drift Gram matrix and K its noise-weighted counterpart."""
    J = np.asarray(drift_gram, dtype=float)
    K = np.asarray(noise_gram, dtype=float)
    p = J.shape[0]
    fixed = sorted(set(int(i) for i in fixed_idx))
    if not 1 <= len(fixed) <= p:
        raise ValueError("need between 1 and p fixed coordinates")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    sv = np.linalg.svd(J, compute_uv=False)
    if sv.min() <= 1e-12:
        raise np.linalg.LinAlgError("drift Gram matrix is singular")
    M = np.linalg.inv(J) - restriction_block(J, fixed)
    M = 0.5 * (M + M.T)
    try:
        B = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (K + K.T))
        if w.min() < -1e-10 * max(1.0, w.max()):
            raise np.linalg.LinAlgError("noise Gram matrix is not positive semidefinite")
        B = V * np.sqrt(np.clip(w, 0.0, None))
    z = rng.standard_normals(seed, stream_id, (mc_n, p)) @ B.T
    samples = np.einsum("ni,ij,nj->n", z, M, z)
    q = float(np.quantile(samples, 1.0 - delta))
    # Order-statistic bandwidth estimate of the quantile standard error.
    srt = np.sort(samples)
    k = int(round((1.0 - delta) * (mc_n - 1)))
    m = max(1, int(round(np.sqrt(mc_n))))
    lo, hi = max(0, k - m), min(mc_n - 1, k + m)
    dens = (hi - lo) / mc_n / max(srt[hi] - srt[lo], 1e-300)
    se = float(np.sqrt(delta * (1.0 - delta) / mc_n) / dens)
    return MCNull(samples=samples, quantile=q, level=delta, se=se)


# ---------------------------------------------------------------------------
# Restricted estimation
# ---------------------------------------------------------------------------

def _pinned_minimize(objective, box: np.ndarray, fixed: dict, start: np.ndarray,
                     opts) -> tuple[np.ndarray, float, object]:
    """Minimize with some coordinates pinned; returns (x, f, status)."""
    dim = box.shape[0]
    free = [i for i in range(dim) if i not in fixed]
    full = np.array(start, dtype=float)
    for i, v in fixed.items():
        full[i] = v
    if not free:
        val = float(objective(full))
        return full, val, None
    def g(z):
        x = full.copy()
        x[free] = z
        return objective(x)
    res = minimize_box(g, box[free], full[free], opts)
    full[free] = res.x
    return full, float(res.fun), res


def _frozen_for_efficient(model: ModelSpec, unrestricted: Estimate):
    """Metric parameter for the efficient-metric drift objective."""
    if unrestricted.mode == "sigma_known":
        return np.empty(0)
    if unrestricted.mode == "shared_fast_drift":
        if unrestricted.method == "type1":
            return unrestricted.stage("alpha_stage1").params
        return unrestricted.stage(f"alpha_stage{unrestricted.order}").params
    return unrestricted.stage("beta").params


def restricted_estimate(obs: ObservationSet, model: ModelSpec, hyp: Hypothesis,
                        method: str, rho, init,
                        opts: Optional[OptimOptions] = None,
                        unrestricted: Optional[Estimate] = None,
                        drift_variant: str = "stage1") -> Estimate:
    """Re-run the relevant stage minimizations over the hypothesis-restricted
    box, freezing the same plugged-in values as the unrestricted fit.

    The unrestricted estimate is computed when not supplied.  The restricted
    stages mirror the unrestricted stage names so statistics can pair them.
    """
    hyp.validate(model)
    if drift_variant not in ("stage1", "efficient"):
        raise ValueError("drift_variant must be stage1 or efficient")
    if unrestricted is None:
        unrestricted = estimate_auto(obs, model, method, rho, init, opts)
    v = unrestricted.order
    ctx = ContrastContext(obs, model, v)
    stages: list = []
    fixed_a = dict(hyp.alpha_fixed)
    fixed_b = dict(hyp.beta_fixed)
    mode = unrestricted.mode
    drift_only = mode in ("sigma_known", "shared_fast_drift")
    if drift_only and hyp.s:
        raise ValueError("this estimation mode carries no free diffusion part to test")

    if hyp.r:
        if drift_variant == "stage1":
            if method == "type1":
                start = unrestricted.stage("alpha_stage1").params
                objective = ctx.drift_ss
                name = "alpha_stage1"
            else:  # type2 and lowrho-like chains share the stage-v objective
                if v == 1:
                    objective = lambda a: ctx.drift_stage(a, stage=1)
                else:
                    prev = unrestricted.stage(f"alpha_stage{v - 1}").params
                    objective = lambda a: ctx.drift_stage(a, prev, v)
                start = unrestricted.stage(f"alpha_stage{v}").params
                name = f"alpha_stage{v}"
        else:
            start = unrestricted.stage("alpha_final").params
            name = "alpha_final"
            if method == "lowrho":
                frozen_b = unrestricted.stage("beta").params
                objective = lambda a: ctx.drift_weighted_order1(a, frozen_b)
            elif method == "type1":
                frozen_b = _frozen_for_efficient(model, unrestricted)
                objective = lambda a: ctx.drift_weighted(a, frozen_b)
            else:
                frozen_b = _frozen_for_efficient(model, unrestricted)
                frozen_a = unrestricted.stage(f"alpha_stage{v}").params
                objective = lambda a: ctx.drift_stage_weighted(a, frozen_a, frozen_b)
        start = hyp.project(start, "alpha")
        x, val, res = _pinned_minimize(objective, model.box_alpha, fixed_a, start, opts)
        stages.append(StageResult(name, x, val,
                                  res.status if res else "pinned",
                                  res.iterations if res else 0,
                                  res.nfev if res else 1))

    beta_restricted = None
    if hyp.s:
        if method == "lowrho":
            objective = ctx.increment_qlik
        else:
            if method == "type1":
                frozen_a = unrestricted.stage("alpha_stage1").params
            else:
                frozen_a = unrestricted.stage(f"alpha_stage{v}").params
            objective = lambda b: ctx.diffusion_qlik(b, frozen_a)
        start = hyp.project(unrestricted.stage("beta").params, "beta")
        x, val, res = _pinned_minimize(objective, model.box_beta, fixed_b, start, opts)
        stages.append(StageResult("beta", x, val,
                                  res.status if res else "pinned",
                                  res.iterations if res else 0,
                                  res.nfev if res else 1))
        beta_restricted = x

    alpha_restricted = None
    for s in stages:
        if s.name.startswith("alpha"):
            alpha_restricted = s.params
    return Estimate(method=method, mode=mode + ":restricted", rho=unrestricted.rho,
                    order=v, stages=stages, alpha_hat=alpha_restricted,
                    beta_hat=beta_restricted)


def lr_statistic(unrestricted: Estimate, restricted: Estimate, which: str,
                 drift_variant: str = "stage1") -> tuple[float, float]:
    """Objective increase from restricting; returns (statistic, clamp).

    The difference is clamped at zero; the clamp magnitude is returned so
    outsized numerical noise can be flagged.
    """
    if which == "drift":
        if drift_variant == "efficient":
            name = "alpha_final"
        elif unrestricted.method == "type1":
            name = "alpha_stage1"
        else:
            name = f"alpha_stage{unrestricted.order}"
    elif which == "diffusion":
        name = "beta"
    else:
        raise ValueError("which must be drift or diffusion")
    lam = restricted.stage(name).value - unrestricted.stage(name).value
    clamp = max(0.0, -lam)
    return max(lam, 0.0), clamp


# ---------------------------------------------------------------------------
# Full test runs
# ---------------------------------------------------------------------------

@dataclass
class TestOutcome:
    which: str                 # drift | diffusion
    statistic: Optional[float]
    null_kind: Optional[str]   # chi2 | mc
    dof: Optional[int]
    quantile: Optional[float]
    p_value: Optional[float]
    level: float
    reject: Optional[bool]
    mc_se: Optional[float] = None
    clamp: float = 0.0

    @property
    def applicable(self) -> bool:
        return self.statistic is not None

    @property
    def decision(self) -> str:
        if not self.applicable:
            return "not-applicable"
        return "reject" if self.reject else "accept"


@dataclass
class NullSpec:
    """Reusable null-quantile bundle for one hypothesis/method/variant."""
    delta: float
    drift_quantile: Optional[float] = None
    drift_kind: Optional[str] = None
    drift_dof: Optional[int] = None
    drift_samples: Optional[np.ndarray] = None
    drift_mc_se: Optional[float] = None
    diffusion_quantile: Optional[float] = None
    diffusion_dof: Optional[int] = None


@dataclass
class TestReport:
    drift: TestOutcome
    diffusion: TestOutcome
    case: Optional[int]
    unrestricted: Estimate
    restricted: Estimate


def make_null_spec(model: ModelSpec, theta, hyp: Hypothesis, delta: float,
                   drift_variant: str = "stage1", mc_n: int = 200000,
                   seed: int = 0, quad_steps: int = 2000,
                   info: Optional[InfoMatrices] = None) -> NullSpec:
    """Null quantiles for both test parts at a plug-in parameter value."""
    spec = NullSpec(delta=delta)
    if hyp.r:
        if drift_variant == "efficient":
            spec.drift_kind = "chi2"
            spec.drift_dof = hyp.r
            spec.drift_quantile = chi2_quantile(hyp.r, delta)
        else:
            if info is None:
                info = info_matrices(model, theta, quad_steps=quad_steps)
            mc = mc_null_quantile(info.drift_gram, info.drift_noise_gram,
                                  [i for i, _ in hyp.alpha_fixed], delta,
                                  mc_n=mc_n, seed=seed)
            spec.drift_kind = "mc"
            spec.drift_dof = hyp.r
            spec.drift_quantile = mc.quantile
            spec.drift_samples = mc.samples
            spec.drift_mc_se = mc.se
    if hyp.s:
        spec.diffusion_dof = hyp.s
        spec.diffusion_quantile = chi2_quantile(hyp.s, delta)
    return spec


def four_way_case(drift_reject: Optional[bool], diffusion_reject: Optional[bool]) -> Optional[int]:
    """Joint judgement: 1 = neither rejected, 2 = diffusion only,
    3 = drift only, 4 = both rejected."""
    if drift_reject is None or diffusion_reject is None:
        return None
    return {(False, False): 1, (False, True): 2,
            (True, False): 3, (True, True): 4}[(drift_reject, diffusion_reject)]


def run_test(obs: ObservationSet, model: ModelSpec, hyp: Hypothesis, method: str,
             rho, delta: float, init, opts: Optional[OptimOptions] = None,
             mc_n: int = 200000, seed: int = 0, drift_variant: str = "stage1",
             nulls: Optional[NullSpec] = None,
             unrestricted: Optional[Estimate] = None) -> TestReport:
    """Unrestricted + restricted estimation, statistics, and decisions.

    Null quantiles default to plug-in evaluation at the unrestricted
    estimate; pass ``nulls`` to reuse precomputed quantiles (e.g. at the
    data-generating parameter inside a simulation study).
    """
    hyp.validate(model)
    if hyp.r == 0 and hyp.s == 0:
        raise ValueError("hypothesis fixes no coordinates")
    if method == "lowrho":
        drift_variant = "efficient"
    if unrestricted is None:
        unrestricted = estimate_auto(obs, model, method, rho, init, opts)
    restricted = restricted_estimate(obs, model, hyp, method, rho, init, opts,
                                     unrestricted=unrestricted,
                                     drift_variant=drift_variant)
    if nulls is None:
        theta_plug = unrestricted.theta_hat
        nulls = make_null_spec(model, theta_plug, hyp, delta,
                               drift_variant=drift_variant, mc_n=mc_n, seed=seed)

    if hyp.r:
        lam, clamp = lr_statistic(unrestricted, restricted, "drift", drift_variant)
        if nulls.drift_kind == "chi2":
            p = chi2_pvalue(hyp.r, lam)
            se = None
        else:
            s = nulls.drift_samples
            p = float((1 + np.count_nonzero(s >= lam)) / (s.size + 1))
            se = nulls.drift_mc_se
        drift_out = TestOutcome("drift", lam, nulls.drift_kind, hyp.r,
                                nulls.drift_quantile, p, delta,
                                bool(lam >= nulls.drift_quantile),
                                mc_se=se, clamp=clamp)
    else:
        drift_out = TestOutcome("drift", None, None, None, None, None, delta, None)

    if hyp.s:
        lam, clamp = lr_statistic(unrestricted, restricted, "diffusion")
        p = chi2_pvalue(hyp.s, lam)
        diff_out = TestOutcome("diffusion", lam, "chi2", hyp.s,
                               nulls.diffusion_quantile, p, delta,
                               bool(lam >= nulls.diffusion_quantile), clamp=clamp)
    else:
        diff_out = TestOutcome("diffusion", None, None, None, None, None, delta, None)

    return TestReport(drift=drift_out, diffusion=diff_out,
                      case=four_way_case(drift_out.reject, diff_out.reject),
                      unrestricted=unrestricted, restricted=restricted)
