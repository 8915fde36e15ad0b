"""Replicated simulation-and-estimation experiments.

``run_experiment`` simulates R independent observation sets (one Philox
stream per replicate, so scheduling never changes results), runs the
requested estimation methods on each, optionally runs the coordinate
tests, and aggregates means, spreads, rejection rates, and normality
diagnostics.  Summaries are written as plain CSV; raw replicate values can
be retained for plot-data emission.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats as spstats

from . import rng
from .asymptotics import asymptotic_cov, info_matrices, theoretical_sd
from .estimators import estimate_auto, global_init, multistart_init
from .models import ModelSpec, make_builtin
from .paths import simulate_sde
from .testing import Hypothesis, NullSpec, make_null_spec, run_test

__all__ = [
    "ExperimentConfig",
    "ExperimentSummary",
    "run_experiment",
    "write_summary",
    "emit_plot_data",
    "normality_diagnostics",
]

WORKERS_ENV = "SMALLDIFF_WORKERS"

_METHODS = ("type1", "type2", "lowrho", "joint")


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    theta0: tuple
    eps: float
    n: int
    T: Optional[float] = None
    x0: Optional[tuple] = None
    refine: int = 10
    rho: float = 1.0
    methods: tuple = ("type1",)
    init: object = "true"            # "true" | tuple(theta) | ("multistart", n) | ("global",)
    replicates: int = 100
    base_seed: int = 0
    hypothesis: Optional[Hypothesis] = None
    delta: float = 0.05
    drift_variant: str = "stage1"
    null_at_truth: bool = True
    mc_n: int = 200000
    keep_raw: bool = True
    workers: Optional[int] = None

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        for m in self.methods:
            if m not in _METHODS:
                raise ValueError(f"unknown method {m!r}; known: {_METHODS}")
        if isinstance(self.init, (list, np.ndarray)):
            object.__setattr__(self, "init", tuple(float(v) for v in self.init))
        object.__setattr__(self, "theta0", tuple(float(v) for v in self.theta0))
        object.__setattr__(self, "methods", tuple(self.methods))

    def build_model(self) -> ModelSpec:
        overrides = {}
        if self.T is not None:
            overrides["T"] = float(self.T)
        if self.x0 is not None:
            overrides["x0"] = tuple(self.x0)
        return make_builtin(self.model, overrides)


def _coord_names(model: ModelSpec, theta_len: int) -> list[str]:
    names = [f"alpha{i + 1}" for i in range(model.p)]
    if not model.shared_params:
        names += [f"beta{j + 1}" for j in range(model.q)]
    return names[:theta_len]


@dataclass
class ExperimentSummary:
    config: ExperimentConfig
    coord_names: list
    stats: dict                 # method -> {mean, sd, theo_sd, count, failures}
    tests: dict                 # method -> {true_case, case_counts, drift_rate, diffusion_rate, applicable}
    diagnostics: dict           # method -> list of (coord, ks_stat, p_value)
    timing: dict                # method -> {total, mean}
    failures: dict              # method -> list of (index, message)
    raw: Optional[dict] = None  # method -> {theta (R', k), stage1, drift_stats, diffusion_stats}
    target_sd: Optional[dict] = None


def _true_case(cfg: ExperimentConfig, model: ModelSpec) -> Optional[int]:
    hyp = cfg.hypothesis
    if hyp is None:
        return None
    theta0 = np.asarray(cfg.theta0, dtype=float)
    alpha0, beta0 = model.split_params(theta0)
    drift_null = all(abs(alpha0[i] - v) < 1e-12 for i, v in hyp.alpha_fixed) if hyp.r else None
    diff_null = all(abs(beta0[i] - v) < 1e-12 for i, v in hyp.beta_fixed) if hyp.s else None
    if drift_null is None or diff_null is None:
        return None
    return {(True, True): 1, (True, False): 2, (False, True): 3, (False, False): 4}[
        (drift_null, diff_null)]


def _resolve_workers(cfg: ExperimentConfig) -> int:
    if cfg.workers is not None:
        return max(1, int(cfg.workers))
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_experiment(cfg: ExperimentConfig) -> ExperimentSummary:
    """Run all replicates and aggregate.  Deterministic given the config
    (timing figures aside); replicate order never affects results."""
    model = cfg.build_model()
    theta0 = np.asarray(cfg.theta0, dtype=float)
    alpha0, beta0 = model.split_params(theta0)
    coord_names = _coord_names(model, theta0.size)

    # Null quantiles shared across replicates, evaluated at the
    # data-generating parameter (simulation-study convention).
    nulls: Optional[NullSpec] = None
    if cfg.hypothesis is not None and cfg.null_at_truth:
        nulls = make_null_spec(model, theta0, cfg.hypothesis, cfg.delta,
                               drift_variant=cfg.drift_variant, mc_n=cfg.mc_n,
                               seed=cfg.base_seed)

    workers = _resolve_workers(cfg)
    indices = list(range(cfg.replicates))
    if workers == 1 or cfg.replicates == 1:
        records = [_replicate_task(cfg, i, nulls) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_pool_task, [(cfg, i, nulls) for i in indices],
                                    chunksize=max(1, cfg.replicates // (workers * 8))))
    records.sort(key=lambda r: r["index"])

    # Theoretical SDs: drift column grid-matched to the observation grid,
    # diffusion column from the fine-quadrature information.
    theo = theoretical_sd(model, theta0, cfg.eps, cfg.n)
    theo_vec = np.concatenate([theo["alpha"], theo["beta"]])[: theta0.size]

    # Limit covariance for standardized-estimate diagnostics.
    target_sd = None
    try:
        info = info_matrices(model, theta0)
        cov = asymptotic_cov(info, "final")
        target_sd = np.sqrt(np.diag(cov))[: theta0.size]
    except Exception:
        pass

    stats_out, tests_out, diag_out, timing_out, fail_out = {}, {}, {}, {}, {}
    raw_out: dict = {}
    true_case = _true_case(cfg, model)
    init_times = [rec.get("init_time") for rec in records if rec.get("init_time")]
    if init_times:
        timing_out["initializer"] = {"total": float(np.sum(init_times)),
                                     "mean": float(np.mean(init_times))}
    for method in cfg.methods:
        thetas, stage1, times, fails = [], [], [], []
        drift_stats, diff_stats, cases = [], [], []
        drift_rejects, diff_rejects = [], []
        for rec in records:
            if "error" in rec:
                fails.append((rec["index"], rec["error"]))
                continue
            entry = rec["methods"][method]
            times.append(entry["time"])
            if entry["error"] is not None:
                fails.append((rec["index"], entry["error"]))
                continue
            thetas.append(entry["theta"])
            if entry["alpha_stage1"] is not None:
                stage1.append(entry["alpha_stage1"])
            t = entry["test"]
            if t is not None:
                if t["drift_stat"] is not None:
                    drift_stats.append(t["drift_stat"])
                    drift_rejects.append(bool(t["drift_reject"]))
                if t["diffusion_stat"] is not None:
                    diff_stats.append(t["diffusion_stat"])
                    diff_rejects.append(bool(t["diffusion_reject"]))
                if t["case"] is not None:
                    cases.append(t["case"])
        arr = np.asarray(thetas) if thetas else np.empty((0, theta0.size))
        count = arr.shape[0]
        mean = arr.mean(axis=0) if count else np.full(theta0.size, np.nan)
        sd = arr.std(axis=0, ddof=1) if count > 1 else np.full(theta0.size, np.nan)
        stats_out[method] = {"mean": mean, "sd": sd, "theo_sd": theo_vec,
                             "count": count, "failures": len(fails)}
        fail_out[method] = fails
        timing_out[method] = {"total": float(np.sum(times)),
                              "mean": float(np.mean(times)) if times else float("nan")}

        diag = []
        if count >= 50 and target_sd is not None:
            scale = np.concatenate([
                np.full(model.p, 1.0 / cfg.eps),
                np.full(theta0.size - model.p, np.sqrt(cfg.n)),
            ])
            standardized = (arr - theta0) * scale
            for j, name in enumerate(coord_names):
                ks, p = normality_diagnostics(standardized[:, j], target_sd[j])
                diag.append((name, ks, p))
        # statistic-vs-null agreement, when a common null was sampled
        if len(drift_stats) >= 50 and nulls is not None:
            if nulls.drift_kind == "mc":
                res = spstats.ks_2samp(np.asarray(drift_stats), nulls.drift_samples)
            else:
                res = spstats.kstest(np.asarray(drift_stats),
                                     spstats.chi2(nulls.drift_dof).cdf)
            diag.append(("drift_statistic", float(res.statistic), float(res.pvalue)))
        if len(diff_stats) >= 50 and nulls is not None and nulls.diffusion_dof:
            res = spstats.kstest(np.asarray(diff_stats),
                                 spstats.chi2(nulls.diffusion_dof).cdf)
            diag.append(("diffusion_statistic", float(res.statistic), float(res.pvalue)))
        diag_out[method] = diag

        if cfg.hypothesis is not None and method != "joint":
            case_counts = {c: int(np.sum(np.asarray(cases) == c)) for c in (1, 2, 3, 4)}
            tests_out[method] = {
                "true_case": true_case,
                "case_counts": case_counts,
                "cases_total": len(cases),
                "drift_rate": float(np.mean(drift_rejects)) if drift_rejects else None,
                "diffusion_rate": float(np.mean(diff_rejects)) if diff_rejects else None,
            }
        if cfg.keep_raw:
            raw_out[method] = {
                "theta": arr,
                "alpha_stage1": np.asarray(stage1) if stage1 else None,
                "drift_stats": np.asarray(drift_stats),
                "diffusion_stats": np.asarray(diff_stats),
            }

    return ExperimentSummary(config=cfg, coord_names=coord_names, stats=stats_out,
                             tests=tests_out, diagnostics=diag_out, timing=timing_out,
                             failures=fail_out, raw=raw_out if cfg.keep_raw else None,
                             target_sd={"sd": target_sd})


def _replicate_task(cfg: ExperimentConfig, index: int,
                    nulls: Optional[NullSpec]) -> dict:
    model = cfg.build_model()
    alpha0, beta0 = model.split_params(np.asarray(cfg.theta0))
    rec: dict = {"index": index, "methods": {}}
    try:
        obs = simulate_sde(model, alpha0, beta0, eps=cfg.eps, n=cfg.n,
                           refine=cfg.refine, seed=cfg.base_seed,
                           stream_id=rng.REPLICATE_BASE + index)
    except Exception as exc:
        rec["error"] = f"simulation failed: {exc}"
        return rec

    multistart = isinstance(cfg.init, tuple) and cfg.init and cfg.init[0] == "multistart"
    global_policy = isinstance(cfg.init, tuple) and cfg.init and cfg.init[0] == "global"
    shared_init = None
    if global_policy:
        t0 = time.perf_counter()
        try:
            shared_init = global_init(obs, model, cfg.rho, cfg.base_seed,
                                      stream_id=rng.GLOBALINIT_STREAM + index)
            if model.q and not model.shared_params:
                shared_init = np.concatenate([shared_init, model.box_beta.mean(axis=1)])
        except Exception as exc:
            rec["error"] = f"initializer failed: {exc}"
            return rec
        rec["init_time"] = time.perf_counter() - t0
    for method in cfg.methods:
        entry: dict = {"error": None, "time": 0.0, "theta": None,
                       "alpha_stage1": None, "test": None}
        t0 = time.perf_counter()
        try:
            if multistart:
                n_starts = int(cfg.init[1])
                flavor = method if method in ("type1", "type2") else "type1"
                init, _ = multistart_init(obs, model, flavor, cfg.rho, n_starts,
                                          cfg.base_seed,
                                          stream_id=rng.MULTISTART_STREAM + index)
                if model.q and not model.shared_params:
                    init = np.concatenate([init, model.box_beta.mean(axis=1)])
            elif global_policy:
                init = shared_init
            elif cfg.init == "true":
                init = np.asarray(cfg.theta0, dtype=float)
            else:
                init = np.asarray(cfg.init, dtype=float)
            est = estimate_auto(obs, model, method, cfg.rho, init)
            entry["theta"] = est.theta_hat
            if est.has_stage("alpha_stage1"):
                entry["alpha_stage1"] = est.stage("alpha_stage1").params
            if cfg.hypothesis is not None and method != "joint":
                report = run_test(obs, model, cfg.hypothesis, method, cfg.rho,
                                  cfg.delta, init, mc_n=cfg.mc_n,
                                  seed=cfg.base_seed,
                                  drift_variant=cfg.drift_variant,
                                  nulls=nulls, unrestricted=est)
                entry["test"] = {
                    "drift_stat": report.drift.statistic,
                    "drift_reject": report.drift.reject,
                    "diffusion_stat": report.diffusion.statistic,
                    "diffusion_reject": report.diffusion.reject,
                    "case": report.case,
                }
        except Exception as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
        entry["time"] = time.perf_counter() - t0
        rec["methods"][method] = entry
    return rec


def _pool_task(args):
    cfg, index, nulls = args
    return _replicate_task(cfg, index, nulls)


def normality_diagnostics(samples, target_sd: float) -> tuple[float, float]:
    """One-sample Kolmogorov-Smirnov statistic and p-value against the
    centered normal with the given standard deviation."""
    samples = np.asarray(samples, dtype=float)
    if samples.size < 50:
        raise ValueError("need at least 50 samples")
    if target_sd <= 0 or not np.all(np.isfinite(samples)):
        raise ValueError("degenerate sample or nonpositive target_sd")
    res = spstats.kstest(samples, spstats.norm(loc=0.0, scale=target_sd).cdf)
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        if np.isnan(x):
            return "nan"
        return f"{x:.17g}"
    return str(x)


def write_summary(summary: ExperimentSummary, outdir) -> dict:
    """Write estimates/tests/diagnostics/timing CSVs; returns path map.

    All files except timing.csv are byte-deterministic for a fixed config.
    """
    os.makedirs(outdir, exist_ok=True)
    paths = {}

    lines = ["method,coord,mean,sd,theo_sd"]
    for method in summary.config.methods:
        st = summary.stats[method]
        for j, name in enumerate(summary.coord_names):
            lines.append(",".join([method, name, _fmt(float(st["mean"][j])),
                                   _fmt(float(st["sd"][j])),
                                   _fmt(float(st["theo_sd"][j]))]))
    paths["estimates"] = os.path.join(outdir, "estimates.csv")
    with open(paths["estimates"], "w") as fh:
        fh.write("\n".join(lines) + "\n")

    if summary.tests:
        lines = ["method,true_case,judged,count,empirical_rate"]
        for method, t in summary.tests.items():
            total = max(t["cases_total"], 1)
            for c in (1, 2, 3, 4):
                cnt = t["case_counts"].get(c, 0)
                lines.append(",".join([method, _fmt(t["true_case"]), f"case{c}",
                                       str(cnt), _fmt(cnt / total)]))
            if t["drift_rate"] is not None:
                lines.append(",".join([method, _fmt(t["true_case"]), "drift_rejected",
                                       "", _fmt(t["drift_rate"])]))
            if t["diffusion_rate"] is not None:
                lines.append(",".join([method, _fmt(t["true_case"]), "diffusion_rejected",
                                       "", _fmt(t["diffusion_rate"])]))
        paths["tests"] = os.path.join(outdir, "tests.csv")
        with open(paths["tests"], "w") as fh:
            fh.write("\n".join(lines) + "\n")

    lines = ["method,coord,ks_stat,p_value"]
    for method in summary.config.methods:
        for name, ks, p in summary.diagnostics.get(method, []):
            lines.append(",".join([method, name, _fmt(ks), _fmt(p)]))
    paths["diagnostics"] = os.path.join(outdir, "diagnostics.csv")
    with open(paths["diagnostics"], "w") as fh:
        fh.write("\n".join(lines) + "\n")

    lines = ["method,total_seconds,mean_seconds,failures"]
    for method in summary.config.methods:
        tm = summary.timing[method]
        lines.append(",".join([method, _fmt(tm["total"]), _fmt(tm["mean"]),
                               str(summary.stats[method]["failures"])]))
    if "initializer" in summary.timing:
        tm = summary.timing["initializer"]
        lines.append(",".join(["initializer", _fmt(tm["total"]), _fmt(tm["mean"]), "0"]))
    paths["timing"] = os.path.join(outdir, "timing.csv")
    with open(paths["timing"], "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return paths


def emit_plot_data(summary: ExperimentSummary, kind: str, outdir) -> list:
    """Write per-coordinate plot-ready CSVs from retained raw replicates.

    Kinds: ``histogram``, ``empirical-cdf``, ``qq`` for standardized
    estimates; ``statistic-vs-null`` for test statistics against their
    null density/CDF.
    """
    if summary.raw is None:
        raise ValueError("raw replicate values were not retained (keep_raw)")
    os.makedirs(outdir, exist_ok=True)
    cfg = summary.config
    model = cfg.build_model()
    theta0 = np.asarray(cfg.theta0, dtype=float)
    scale = np.concatenate([np.full(model.p, 1.0 / cfg.eps),
                            np.full(theta0.size - model.p, np.sqrt(cfg.n))])
    written = []
    target_sd = summary.target_sd["sd"] if summary.target_sd else None
    for method in cfg.methods:
        raw = summary.raw[method]
        arr = raw["theta"]
        if kind in ("histogram", "empirical-cdf", "qq"):
            if arr.size == 0:
                continue
            standardized = (arr - theta0) * scale
            for j, name in enumerate(summary.coord_names):
                z = np.sort(standardized[:, j])
                sd = float(target_sd[j]) if target_sd is not None else float(z.std(ddof=1))
                dist = spstats.norm(loc=0.0, scale=sd)
                path = os.path.join(outdir, f"{method}_{name}_{kind.replace('-', '_')}.csv")
                if kind == "histogram":
                    counts, edges = np.histogram(z, bins=40)
                    dens = counts / (len(z) * np.diff(edges))
                    mid = 0.5 * (edges[:-1] + edges[1:])
                    rows = ["bin_mid,density,theory_density"]
                    rows += [f"{m:.17g},{d:.17g},{dist.pdf(m):.17g}"
                             for m, d in zip(mid, dens)]
                elif kind == "empirical-cdf":
                    ecdf = np.arange(1, len(z) + 1) / len(z)
                    rows = ["x,ecdf,theory_cdf"]
                    rows += [f"{x:.17g},{e:.17g},{dist.cdf(x):.17g}"
                             for x, e in zip(z, ecdf)]
                else:  # qq
                    probs = (np.arange(1, len(z) + 1) - 0.5) / len(z)
                    tq = dist.ppf(probs)
                    rows = ["theory_quantile,sample_quantile"]
                    rows += [f"{a:.17g},{b:.17g}" for a, b in zip(tq, z)]
                with open(path, "w") as fh:
                    fh.write("\n".join(rows) + "\n")
                written.append(path)
        elif kind == "statistic-vs-null":
            for label, dof in (("drift", cfg.hypothesis.r if cfg.hypothesis else 0),
                               ("diffusion", cfg.hypothesis.s if cfg.hypothesis else 0)):
                vals = raw[f"{label}_stats"]
                if vals.size == 0 or dof == 0:
                    continue
                path = os.path.join(outdir, f"{method}_{label}_statistic.csv")
                use_mc = label == "drift" and cfg.drift_variant == "stage1"
                if use_mc:
                    nulls = make_null_spec(model, theta0, cfg.hypothesis, cfg.delta,
                                           drift_variant="stage1", mc_n=cfg.mc_n,
                                           seed=cfg.base_seed)
                    ref = np.sort(nulls.drift_samples)
                    grid = np.linspace(0.0, max(ref.max(), vals.max()), 201)
                    cdf = np.searchsorted(ref, grid, side="right") / ref.size
                    # density from the sampled null, binned on the grid
                    counts, edges = np.histogram(ref, bins=grid)
                    dens_bins = counts / (ref.size * np.diff(edges))
                    pdf = np.concatenate([[dens_bins[0]], dens_bins])
                else:
                    grid = np.linspace(0.0, max(float(vals.max()), 1.0) * 1.2, 201)
                    cdf = spstats.chi2(dof).cdf(grid)
                    pdf = spstats.chi2(dof).pdf(grid)
                emp = np.searchsorted(np.sort(vals), grid, side="right") / vals.size
                rows = ["x,empirical_cdf,null_cdf,null_density"]
                rows += [f"{x:.17g},{e:.17g},{c:.17g},{d:.17g}"
                         for x, e, c, d in zip(grid, emp, cdf, pdf)]
                with open(path, "w") as fh:
                    fh.write("\n".join(rows) + "\n")
                written.append(path)
        else:
            raise ValueError(f"unknown plot-data kind {kind!r}")
    return written
