"""Acceptance suite: replicates the reference simulation studies at desk
scale and checks the package's oracle identities.

Each criterion prints one PASS/FAIL line.  The Monte Carlo experiments are
deterministic for the pinned seeds, so these tests are stable re-runs.
Heavy experiments are shared across criteria through module-scoped
fixtures.  Expected total runtime is roughly 20-30 minutes on two cores.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats as spstats

from smalldiff import rng
from smalldiff.asymptotics import asymptotic_cov, info_matrices, theoretical_sd
from smalldiff.contrasts import ContrastContext
from smalldiff.generator import drift_correction, step_residuals
from smalldiff.models import make_builtin
from smalldiff.montecarlo import ExperimentConfig, run_experiment, write_summary
from smalldiff.optimizer import central_diff_grad
from smalldiff.paths import simulate_sde
from smalldiff.testing import (Hypothesis, chi2_quantile, make_null_spec,
                               mc_null_quantile, restriction_block)
from tests.conftest import euler_path_obs


THETA0_M1 = (3.0, 6.0, 5.0, 4.0, 1.0, 0.5)
HYP_M1 = Hypothesis.parse("alpha[1]=3.0, alpha[4]=4.0, beta[1]=1.0, beta[2]=0.5")

TABLE1 = {
    # (eps, n) -> method -> (means, sds)
    (0.01, 1000): {
        "type1": ((3.0002, 6.0015, 5.0003, 4.0008, 0.9978, 0.4986),
                  (0.0171, 0.0176, 0.0072, 0.0137, 0.0227, 0.0114)),
        "type2": ((3.0002, 6.0015, 5.0003, 4.0009, 0.9978, 0.4986),
                  (0.0171, 0.0176, 0.0072, 0.0137, 0.0227, 0.0114)),
    },
    (0.01, 100): {
        "type1": ((3.0110, 6.0085, 5.0008, 3.9993, 0.9803, 0.4881),
                  (0.0172, 0.0178, 0.0072, 0.0138, 0.0720, 0.0360)),
        "type2": ((3.0099, 6.0095, 5.0006, 3.9997, 0.9846, 0.4884),
                  (0.0172, 0.0179, 0.0072, 0.0138, 0.0720, 0.0360)),
    },
}

PRINTED_SIR_SD = {
    ((1.2, 1.0), 10, 1.0): (0.034884, 0.031845),
    ((1.2, 1.0), 30, 1.0): (0.033545, 0.030622),
    ((1.2, 1.0), 360, 12.0): (0.004915, 0.004486),
    ((0.9, 1.0), 10, 1.0): (0.032337, 0.034086),
    ((0.9, 1.0), 30, 1.0): (0.031253, 0.032944),
    ((0.9, 1.0), 360, 12.0): (0.011358, 0.011972),
}


def _report(criterion: str, ok: bool, detail: str = "") -> None:
    flag = "PASS" if ok else "FAIL"
    # flush immediately so forked worker processes never inherit the line
    print(f"[acceptance] {criterion}: {flag} {detail}", flush=True)


# ---------------------------------------------------------------------------
# shared experiment runs
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def table1_run():
    cfg = ExperimentConfig(model="model1", theta0=THETA0_M1, eps=0.01, n=1000,
                           refine=10, rho=1.0, methods=("type1", "type2"),
                           init="true", replicates=500, base_seed=112,
                           keep_raw=False, workers=2)
    return run_experiment(cfg)


@pytest.fixture(scope="module")
def case1_run():
    cfg = ExperimentConfig(model="model1", theta0=THETA0_M1, eps=0.01, n=1000,
                           refine=10, rho=1.0, methods=("type1",),
                           init="true", replicates=1000, base_seed=204,
                           hypothesis=HYP_M1, delta=0.05, mc_n=200000,
                           keep_raw=True, workers=2)
    return run_experiment(cfg)


@pytest.fixture(scope="module")
def case4_run():
    cfg = ExperimentConfig(model="model1", theta0=(3.1, 6.0, 5.0, 4.1, 1.1, 0.6),
                           eps=0.01, n=1000, refine=10, rho=1.0,
                           methods=("type1",), init="true", replicates=1000,
                           base_seed=205, hypothesis=HYP_M1, delta=0.05,
                           mc_n=200000, keep_raw=False, workers=2)
    return run_experiment(cfg)


def _assert_low_failure_rate(summary, methods, r):
    for m in methods:
        assert summary.stats[m]["failures"] <= 0.02 * r, (
            f"{m} failure rate above 2%")


# ---------------------------------------------------------------------------
# criterion 1: Table 1 reproduction
# ---------------------------------------------------------------------------

def test_criterion_1_estimation_reference_values(table1_run):
    s = table1_run
    _assert_low_failure_rate(s, ("type1", "type2"), 500)
    ok = True
    details = []
    for method in ("type1", "type2"):
        means, sds = TABLE1[(0.01, 1000)][method]
        got_mean = s.stats[method]["mean"]
        got_sd = s.stats[method]["sd"]
        for j in range(6):
            mean_tol = 4.0 * sds[j] / math.sqrt(500)
            mean_ok = abs(got_mean[j] - means[j]) <= mean_tol
            sd_ok = abs(got_sd[j] / sds[j] - 1.0) <= 0.15
            ok &= mean_ok and sd_ok
            if not (mean_ok and sd_ok):
                details.append(f"{method} coord {j + 1}: mean {got_mean[j]:.4f} "
                               f"(ref {means[j]}, tol {mean_tol:.4f}) "
                               f"sd {got_sd[j]:.4f} (ref {sds[j]})")
    _report("criterion 1 (estimation means/SDs, R=500)", ok, "; ".join(details))
    assert ok, details


# ---------------------------------------------------------------------------
# criterion 2: robustness to a bad initial point
# ---------------------------------------------------------------------------

def test_criterion_2_bad_init_robustness():
    cfg = ExperimentConfig(model="model1", theta0=THETA0_M1, eps=0.01, n=100,
                           refine=10, rho=1.0,
                           methods=("type1", "type2", "joint"),
                           init=(6.0, 4.0, 6.0, 8.0, 2.0, 1.0),
                           replicates=200, base_seed=113, keep_raw=False,
                           workers=2)
    s = run_experiment(cfg)
    _assert_low_failure_rate(s, ("type1", "type2"), 200)
    truth = np.asarray(THETA0_M1)
    ok = True
    details = []
    for method in ("type1", "type2"):
        ref = np.asarray(TABLE1[(0.01, 100)][method][0][:4])
        gap = np.abs(s.stats[method]["mean"][:4] - ref)
        if gap.max() > 0.05:
            ok = False
            details.append(f"{method} drift means drift off reference by {gap.max():.3f}")
    adaptive_err = np.maximum(np.abs(s.stats["type1"]["mean"] - truth),
                              np.abs(s.stats["type2"]["mean"] - truth))
    joint_err = np.abs(s.stats["joint"]["mean"] - truth)
    blowups = int(np.sum(joint_err >= 10.0 * np.maximum(adaptive_err, 1e-12)))
    if blowups < 2:
        ok = False
        details.append(f"joint baseline only {blowups} coordinates at >=10x error")
    _report("criterion 2 (bad-init robustness, R=200)", ok,
            "; ".join(details) or f"joint blowups on {blowups} coords")
    assert ok, details


# ---------------------------------------------------------------------------
# criteria 3 and 6: sizes/powers and distributional checks
# ---------------------------------------------------------------------------

def test_criterion_3_sizes_and_powers(case1_run, case4_run):
    t1 = case1_run.tests["type1"]
    t4 = case4_run.tests["type1"]
    size_ok = 0.03 <= t1["drift_rate"] <= 0.08 and 0.03 <= t1["diffusion_rate"] <= 0.08
    power_ok = t4["drift_rate"] >= 0.99 and t4["diffusion_rate"] >= 0.99
    _report("criterion 3 (test sizes/powers, R=1000)", size_ok and power_ok,
            f"sizes drift {t1['drift_rate']:.4f} diffusion {t1['diffusion_rate']:.4f}; "
            f"powers drift {t4['drift_rate']:.4f} diffusion {t4['diffusion_rate']:.4f}")
    assert size_ok and power_ok


def test_criterion_6_distributional_checks(case1_run):
    # NOTE: this criterion is implemented exactly as stated and is expected
    # to fail for any correct implementation of the staged estimators at
    # these settings.  The estimators carry a small finite-sample bias
    # (documented by the reference tables themselves: e.g. drift coordinate
    # 2 mean 6.0015 and diffusion coordinate 1 mean 0.9978 at eps=0.01,
    # n=1000, i.e. 0.09-0.10 standardized units), and a mean-zero KS test
    # on 1000 replicates detects a shift of that size with high
    # probability.  The variance and shape do match: see the printed
    # diagnostics.  Analysis lives in the project notes.
    s = case1_run
    ok = True
    details = []
    # diagnosis: standardized shifts and SD ratios against the limit law
    model = s.config.build_model()
    info6 = info_matrices(model, np.asarray(s.config.theta0))
    tsd = np.sqrt(np.diag(asymptotic_cov(info6, "final")))
    arr = s.raw["type1"]["theta"]
    scale = np.concatenate([np.full(4, 1.0 / s.config.eps),
                            np.full(2, math.sqrt(s.config.n))])
    z = (arr - np.asarray(s.config.theta0)) * scale
    shifts = z.mean(axis=0) / tsd
    sd_ratios = z.std(axis=0, ddof=1) / tsd
    print(f"[acceptance] criterion 6 diagnosis: standardized mean shifts "
          f"{np.round(shifts, 3)}, SD ratios {np.round(sd_ratios, 3)}",
          flush=True)
    # standardized final estimates against the limit normal marginals
    for name, ks, p in s.diagnostics["type1"]:
        if p <= 0.01:
            ok = False
            details.append(f"{name} KS p={p:.4f}")
    # diffusion statistic against chi-squared with 2 degrees of freedom
    lam2 = s.raw["type1"]["diffusion_stats"]
    p_chi = spstats.kstest(lam2, spstats.chi2(2).cdf).pvalue
    if p_chi <= 0.01:
        ok = False
        details.append(f"diffusion statistic chi2 KS p={p_chi:.4f}")
    # drift statistic against the sampled null (two-sample)
    model = s.config.build_model()
    nulls = make_null_spec(model, np.asarray(s.config.theta0), HYP_M1, 0.05,
                           mc_n=200000, seed=s.config.base_seed)
    lam1 = s.raw["type1"]["drift_stats"]
    p_pi = spstats.ks_2samp(lam1, nulls.drift_samples).pvalue
    if p_pi <= 0.01:
        ok = False
        details.append(f"drift statistic two-sample KS p={p_pi:.4f}")
    _report("criterion 6 (distributional checks, R=1000)", ok,
            "; ".join(details) or
            f"all marginals pass; chi2 p={p_chi:.3f}, drift-null p={p_pi:.3f}")
    assert ok, details


# ---------------------------------------------------------------------------
# criterion 4: SIR estimation against theoretical SDs
# ---------------------------------------------------------------------------

def test_criterion_4_sir_estimation():
    # printed theoretical SD columns reproduce to three significant digits
    theo_ok = True
    for (theta0, n, T), printed in PRINTED_SIR_SD.items():
        model = make_builtin("sir", {"T": T})
        sds = theoretical_sd(model, theta0, eps=1e-4, n=n)["alpha"]
        rel = np.abs(sds - np.asarray(printed)) / np.asarray(printed)
        theo_ok &= bool(rel.max() < 5e-3)

    cfg = ExperimentConfig(model="sir", theta0=(1.2, 1.0), eps=1e-4, n=360,
                           T=12.0, refine=10, rho=4.0,
                           methods=("type1", "type2"), init="true",
                           replicates=500, base_seed=114, keep_raw=False,
                           workers=2)
    s = run_experiment(cfg)
    _assert_low_failure_rate(s, ("type1", "type2"), 500)
    theo = s.stats["type1"]["theo_sd"]
    sd_ok = True
    details = []
    for method in ("type1", "type2"):
        ratio = s.stats[method]["sd"] / theo
        if np.abs(ratio - 1.0).max() > 0.15:
            sd_ok = False
            details.append(f"{method} SD/theory ratios {np.round(ratio, 3)}")
    ok = theo_ok and sd_ok
    _report("criterion 4 (SIR SDs vs theory, R=500)", ok,
            "; ".join(details) or
            f"theory columns match printed values; SD ratios "
            f"{np.round(s.stats['type1']['sd'] / theo, 3)}")
    assert ok, details


# ---------------------------------------------------------------------------
# criterion 5: SIR coordinate test
# ---------------------------------------------------------------------------

def test_criterion_5_sir_test():
    hyp = Hypothesis(alpha_fixed=((0, 1.2), (1, 1.0)))
    size_cfg = ExperimentConfig(model="sir", theta0=(1.2, 1.0), eps=1e-4, n=10,
                                T=1.0, refine=10, rho=4.0, methods=("type2",),
                                init="true", replicates=1000, base_seed=115,
                                hypothesis=hyp, delta=0.05,
                                drift_variant="efficient", keep_raw=False,
                                workers=2)
    size = run_experiment(size_cfg).tests["type2"]["drift_rate"]
    power_cfg = ExperimentConfig(model="sir", theta0=(1.3, 0.9), eps=1e-4,
                                 n=360, T=12.0, refine=10, rho=4.0,
                                 methods=("type2",), init="true",
                                 replicates=1000, base_seed=116,
                                 hypothesis=hyp, delta=0.05,
                                 drift_variant="efficient", keep_raw=False,
                                 workers=2)
    power = run_experiment(power_cfg).tests["type2"]["drift_rate"]
    ok = 0.03 <= size <= 0.08 and power >= 0.99
    _report("criterion 5 (SIR test size/power, R=1000)", ok,
            f"size {size:.4f} (band 0.03-0.08), power {power:.4f} (>= 0.99)")
    assert ok, (size, power)


# ---------------------------------------------------------------------------
# criterion 7: oracle and property suite (fast, no statistics)
# ---------------------------------------------------------------------------

def test_criterion_7_oracles(linear_model, ou_model):
    checks = {}

    # correction sums match the symbolic linear-model values to 1e-12
    a, h = 1.7, 0.05
    xs = np.array([[0.4], [1.0], [-2.3]])
    worst = 0.0
    for order in (2, 3):
        want = sum(h ** (j + 1) / math.factorial(j + 1) * a ** (j + 1) * xs
                   for j in range(1, order))
        got = drift_correction(linear_model, (a,), xs, order, h)
        worst = max(worst, float(np.abs(got - want).max()))
    checks["correction symbolic 1e-12"] = worst <= 1e-12

    # residual identity P_l = P_1 - Q_l
    obs = euler_path_obs(linear_model, (0.8,), n=30, eps=0.01)
    t1 = step_residuals(obs, linear_model, (0.9,), 1)
    t3 = step_residuals(obs, linear_model, (0.9,), 3)
    checks["residual identity"] = bool(
        np.abs(t3.residual - (t1.first_order - t3.correction)).max() <= 1e-14)

    # contrast gradient against the analytic chain rule
    obs_g = simulate_sde(linear_model, (0.8,), (1.0,), eps=0.1, n=40, refine=5,
                         seed=13)
    ctx = ContrastContext(obs_g, linear_model, 1)
    x = obs_g.values[:-1, 0]
    dx = np.diff(obs_g.values[:, 0])
    w = 1.0 / (obs_g.epsilon ** 2 * obs_g.h)
    grad_ok = True
    for a_probe in (0.6, 1.3):
        analytic = -2.0 * w * obs_g.h * np.sum((dx - obs_g.h * a_probe * x) * x)
        numeric = central_diff_grad(lambda v: ctx.drift_ss(v), np.array([a_probe]))[0]
        grad_ok &= abs(numeric - analytic) <= 1e-5 * abs(analytic)
    checks["contrast gradient 1e-5"] = grad_ok

    # restriction-block projection identity to 1e-10
    proj_ok = True
    for seed, dim, fixed in ((1, 4, [0, 3]), (2, 6, [1, 4])):
        m = rng.standard_normals(seed, 3, (dim, dim))
        spd = m @ m.T + dim * np.eye(dim)
        G = restriction_block(spd, fixed)
        v = rng.standard_normals(seed, 4, dim)
        for i in fixed:
            v[i] = 0.0
        proj_ok &= bool(np.abs(G @ spd @ v - v).max() <= 1e-10)
    checks["projection identity 1e-10"] = proj_ok

    # sampled null equals chi-squared when the Gram pair coincides
    m = rng.standard_normals(5, 3, (4, 4))
    spd = m @ m.T + 4 * np.eye(4)
    mc = mc_null_quantile(spd, spd, [0, 1], delta=0.05, mc_n=200000, seed=9)
    checks["pi_r == chi2_r within 2%"] = bool(
        abs(mc.quantile / chi2_quantile(2, 0.05) - 1.0) <= 0.02)

    # chi-squared quantile closed form
    checks["chi2(2,0.05) = -2 ln 0.05"] = bool(
        abs(chi2_quantile(2, 0.05) + 2.0 * math.log(0.05)) <= 1e-8)

    # determinism under fixed seeds
    o1 = simulate_sde(ou_model, (1.0,), (0.5,), eps=0.1, n=50, refine=5,
                      seed=77, stream_id=2)
    o2 = simulate_sde(ou_model, (1.0,), (0.5,), eps=0.1, n=50, refine=5,
                      seed=77, stream_id=2)
    checks["determinism"] = bool(np.array_equal(o1.values, o2.values))

    # expansion-order table
    from smalldiff.estimators import approximation_degree
    checks["order table"] = (approximation_degree(1), approximation_degree(4),
                             approximation_degree(0.5)) == (2, 5, 1)

    ok = all(checks.values())
    _report("criterion 7 (oracle/property suite)", ok,
            "; ".join(k for k, v in checks.items() if not v) or
            f"{len(checks)} identities verified")
    assert ok, checks


# ---------------------------------------------------------------------------
# criterion 8: drift-only model timing direction and accuracy
# ---------------------------------------------------------------------------

def test_criterion_8_model3_timing_and_accuracy():
    cfg = ExperimentConfig(model="model3", theta0=(3.0, 7.0, 2.0, 8.0, 1.0, 6.0),
                           eps=0.001, n=100, refine=50, rho=2.5,
                           methods=("type1", "type2"), init=("global",),
                           replicates=50, base_seed=117, keep_raw=False,
                           workers=2)
    s = run_experiment(cfg)
    _assert_low_failure_rate(s, ("type1", "type2"), 50)
    truth = np.asarray(cfg.theta0)
    err1 = np.abs(s.stats["type1"]["mean"] - truth)
    err2 = np.abs(s.stats["type2"]["mean"] - truth)
    acc_ok = err1.max() <= 0.02 and err2.max() <= 0.02
    t1 = s.timing["type1"]["total"]
    t2 = s.timing["type2"]["total"]
    time_ok = t2 < t1
    _report("criterion 8 (drift-only timing/accuracy, R=50)", acc_ok and time_ok,
            f"stage wall-clock type1 {t1:.1f}s vs type2 {t2:.1f}s; "
            f"max mean errors {err1.max():.4f} / {err2.max():.4f}")
    assert acc_ok and time_ok, (err1, err2, t1, t2)
