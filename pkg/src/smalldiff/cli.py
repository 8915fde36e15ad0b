"""Command-line front end.

Subcommands:

* ``simulate``   - write an observation CSV for a model at given parameters
* ``estimate``   - read observations, run a staged method, write estimate.csv
* ``test``       - run a coordinate-fixing hypothesis test, write a report
* ``experiment`` - run a replicated study from a config file
* ``info``       - print model metadata, expansion order, and information
  matrix condition numbers

Exit codes: 0 success, 1 usage/config error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .asymptotics import info_matrices, theoretical_sd
from .estimators import approximation_degree, estimate_auto
from .models import BUILTIN_DEFAULTS, available_models, make_builtin
from .montecarlo import ExperimentConfig, emit_plot_data, run_experiment, write_summary
from .paths import ParseError, load_observations, save_observations, simulate_sde
from .testing import Hypothesis, run_test

__all__ = ["run_cli", "main", "parse_config", "config_to_json"]

#: Recognized experiment-config keys with parse/validation info.
CONFIG_KEYS = {
    "model": "model name (model1 | sir | model3 | registered plug-in)",
    "theta0": "comma-separated true parameters",
    "eps": "dispersion coefficient (> 0)",
    "n": "number of observation intervals",
    "T": "horizon (defaults to the model's)",
    "x0": "comma-separated initial state override",
    "refine": "simulation sub-steps per interval (default 10)",
    "rho": "balance coefficient (sets the expansion order)",
    "methods": "comma-separated subset of type1,type2,lowrho,joint",
    "init": "'true', comma-separated vector, multistart:<n_starts>, or global",
    "replicates": "number of Monte Carlo replicates",
    "seed": "base seed (default 0)",
    "hypothesis": "entries like alpha[1]=3.0, beta[2]=0.5",
    "delta": "test level (default 0.05)",
    "drift_variant": "stage1 | efficient (default stage1)",
    "null_at_truth": "true/false: null quantiles at theta0 (default true)",
    "mc_n": "Monte Carlo null sample size (default 200000)",
    "keep_raw": "true/false: retain raw replicate values (default true)",
    "workers": "worker processes (default: SMALLDIFF_WORKERS or CPU count)",
    "plot_data": "comma-separated plot kinds to emit after the run",
}


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "yes", "1", "on"):
        return True
    if text.lower() in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_vector(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def parse_config(path) -> tuple[ExperimentConfig, dict]:
    """Parse a key=value config file (or a flat JSON object) into an
    experiment configuration.  Unknown keys are rejected with their line
    number; defaults are documented in ``--help``."""
    if not os.path.exists(path):
        raise ConfigError(f"no such config file: {path}")
    raw: dict = {}
    if str(path).endswith(".json"):
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("JSON config must be a flat object")
        for key, val in data.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(val, bool):
                raw[key] = "true" if val else "false"
            elif isinstance(val, (list, tuple)):
                raw[key] = ",".join(str(v) for v in val)
            else:
                raw[key] = str(val)
    else:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"line {lineno}: expected key = value")
                key, val = stripped.split("=", 1)
                key = key.strip()
                if key not in CONFIG_KEYS:
                    raise ConfigError(f"line {lineno}: unknown config key {key!r}")
                raw[key] = val.strip()

    for required in ("model", "theta0", "eps", "n"):
        if required not in raw:
            raise ConfigError(f"config missing required key {required!r}")

    extras: dict = {"plot_data": []}
    kw: dict = {
        "model": raw["model"],
        "theta0": _parse_vector(raw["theta0"]),
        "eps": float(raw["eps"]),
        "n": int(raw["n"]),
    }
    if "T" in raw:
        kw["T"] = float(raw["T"])
    if "x0" in raw:
        kw["x0"] = _parse_vector(raw["x0"])
    if "refine" in raw:
        kw["refine"] = int(raw["refine"])
    if "rho" in raw:
        kw["rho"] = float(raw["rho"])
    if "methods" in raw:
        kw["methods"] = tuple(m.strip() for m in raw["methods"].split(",") if m.strip())
    if "init" in raw:
        txt = raw["init"]
        if txt == "true":
            kw["init"] = "true"
        elif txt == "global":
            kw["init"] = ("global",)
        elif txt.startswith("multistart:"):
            kw["init"] = ("multistart", int(txt.split(":", 1)[1]))
        else:
            kw["init"] = _parse_vector(txt)
    if "replicates" in raw:
        kw["replicates"] = int(raw["replicates"])
    if "seed" in raw:
        kw["base_seed"] = int(raw["seed"])
    if "hypothesis" in raw:
        kw["hypothesis"] = Hypothesis.parse(raw["hypothesis"])
    if "delta" in raw:
        kw["delta"] = float(raw["delta"])
    if "drift_variant" in raw:
        kw["drift_variant"] = raw["drift_variant"]
    if "null_at_truth" in raw:
        kw["null_at_truth"] = _parse_bool(raw["null_at_truth"])
    if "mc_n" in raw:
        kw["mc_n"] = int(raw["mc_n"])
    if "keep_raw" in raw:
        kw["keep_raw"] = _parse_bool(raw["keep_raw"])
    if "workers" in raw:
        kw["workers"] = int(raw["workers"])
    if "plot_data" in raw:
        extras["plot_data"] = [k.strip() for k in raw["plot_data"].split(",") if k.strip()]
    try:
        cfg = ExperimentConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc))
    return cfg, extras


def config_to_json(cfg: ExperimentConfig) -> str:
    """JSON-compatible export of a parsed configuration."""
    out = {
        "model": cfg.model, "theta0": list(cfg.theta0), "eps": cfg.eps, "n": cfg.n,
        "refine": cfg.refine, "rho": cfg.rho, "methods": list(cfg.methods),
        "replicates": cfg.replicates, "seed": cfg.base_seed, "delta": cfg.delta,
        "drift_variant": cfg.drift_variant, "null_at_truth": cfg.null_at_truth,
        "mc_n": cfg.mc_n, "keep_raw": cfg.keep_raw,
    }
    if cfg.T is not None:
        out["T"] = cfg.T
    if cfg.x0 is not None:
        out["x0"] = list(cfg.x0)
    if isinstance(cfg.init, tuple) and cfg.init and cfg.init[0] == "multistart":
        out["init"] = f"multistart:{cfg.init[1]}"
    elif isinstance(cfg.init, tuple) and cfg.init and cfg.init[0] == "global":
        out["init"] = "global"
    elif cfg.init == "true":
        out["init"] = "true"
    else:
        out["init"] = list(cfg.init)
    if cfg.hypothesis is not None:
        parts = [f"alpha[{i + 1}]={v}" for i, v in cfg.hypothesis.alpha_fixed]
        parts += [f"beta[{i + 1}]={v}" for i, v in cfg.hypothesis.beta_fixed]
        out["hypothesis"] = ", ".join(parts)
    if cfg.workers is not None:
        out["workers"] = cfg.workers
    return json.dumps(out, indent=2, sort_keys=True)


def _build_parser() -> argparse.ArgumentParser:
    epilog = "config keys:\n" + "\n".join(
        f"  {k:<14} {v}" for k, v in CONFIG_KEYS.items())
    parser = argparse.ArgumentParser(
        prog="smalldiff",
        description="Staged estimation and tests for small-noise diffusions "
                    "observed at discrete times.",
        epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate and write an observation CSV")
    sim.add_argument("--model", required=True, choices=available_models())
    sim.add_argument("--theta", required=True, help="comma-separated parameters")
    sim.add_argument("--eps", type=float, required=True)
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--T", type=float, default=None)
    sim.add_argument("--x0", default=None, help="comma-separated initial state")
    sim.add_argument("--refine", type=int, default=10)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", default="observations.csv")

    est = sub.add_parser("estimate", help="estimate parameters from an observation CSV")
    est.add_argument("--model", required=True, choices=available_models())
    est.add_argument("--obs", required=True, help="observation CSV from `simulate`")
    est.add_argument("--method", default="type1",
                     choices=["type1", "type2", "lowrho", "joint"])
    est.add_argument("--rho", type=float, default=1.0)
    est.add_argument("--init", default="true",
                     help="'true' (model defaults), or comma-separated vector")
    est.add_argument("--T", type=float, default=None)
    est.add_argument("--out", default="estimate.csv")

    tst = sub.add_parser("test", help="run a coordinate-fixing hypothesis test")
    tst.add_argument("--model", required=True, choices=available_models())
    tst.add_argument("--obs", required=True)
    tst.add_argument("--method", default="type1", choices=["type1", "type2", "lowrho"])
    tst.add_argument("--rho", type=float, default=1.0)
    tst.add_argument("--hypothesis", required=True,
                     help="e.g. 'alpha[1]=3.0, alpha[4]=4.0, beta[1]=1.0'")
    tst.add_argument("--delta", type=float, default=0.05)
    tst.add_argument("--drift-variant", default="stage1", choices=["stage1", "efficient"])
    tst.add_argument("--init", default="true")
    tst.add_argument("--mc-n", type=int, default=200000)
    tst.add_argument("--seed", type=int, default=0)
    tst.add_argument("--T", type=float, default=None)
    tst.add_argument("--out", default="test_report.txt")

    exp = sub.add_parser("experiment", help="run a replicated study from a config file")
    exp.add_argument("--config", required=True)
    exp.add_argument("--outdir", default="experiment_out")
    exp.add_argument("--export-json", action="store_true",
                     help="also write the parsed config as config.json")

    inf = sub.add_parser("info", help="print model metadata and limit diagnostics")
    inf.add_argument("--model", required=True, choices=available_models())
    inf.add_argument("--rho", type=float, default=1.0)
    inf.add_argument("--theta", default=None, help="parameters (defaults per model)")
    inf.add_argument("--T", type=float, default=None)
    return parser


def _model_from_args(args):
    overrides = {}
    if getattr(args, "T", None) is not None:
        overrides["T"] = args.T
    if getattr(args, "x0", None):
        overrides["x0"] = _parse_vector(args.x0)
    return make_builtin(args.model, overrides)


def _default_theta(name: str) -> tuple:
    return tuple(BUILTIN_DEFAULTS[name]["theta0"])


def _cmd_simulate(args) -> int:
    model = _model_from_args(args)
    theta = _parse_vector(args.theta)
    alpha, beta = model.split_params(theta)
    obs = simulate_sde(model, alpha, beta, eps=args.eps, n=args.n,
                       refine=args.refine, seed=args.seed)
    save_observations(obs, args.out)
    print(f"wrote {args.out} ({obs.n + 1} rows, d={obs.d}, eps={obs.epsilon}, "
          f"T={obs.T}, seed={args.seed})")
    return 0


def _cmd_estimate(args) -> int:
    model = _model_from_args(args)
    obs = load_observations(args.obs)
    if args.T is None and abs(obs.T - model.T) > 1e-12:
        model = make_builtin(args.model, {"T": obs.T})
    init = _default_theta(args.model) if args.init == "true" else _parse_vector(args.init)
    est = estimate_auto(obs, model, args.method, args.rho, init)
    theta_hat = est.theta_hat
    sds = theoretical_sd(model, theta_hat, obs.epsilon, obs.n)
    se = np.concatenate([sds["alpha"], sds["beta"]])[: theta_hat.size]
    lines = ["stage,coord,value,std_error"]
    for s in est.stages:
        for j, val in enumerate(np.atleast_1d(s.params)):
            lines.append(f"{s.name},{j + 1},{val:.17g},")
    names = [f"alpha{i + 1}" for i in range(model.p)]
    if not model.shared_params and est.beta_hat is not None:
        names += [f"beta{j + 1}" for j in range(model.q)]
    for j, name in enumerate(names[: theta_hat.size]):
        lines.append(f"final,{name},{theta_hat[j]:.17g},{se[j]:.17g}")
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    shown = ", ".join(f"{n}={v:.6g}" for n, v in zip(names, theta_hat))
    print(f"wrote {args.out}: {shown}")
    for note in est.notes:
        print(f"note: {note}")
    return 0


_CASE_TEXT = {
    1: "neither parameter group is rejected",
    2: "diffusion rejected, drift not rejected",
    3: "drift rejected, diffusion not rejected",
    4: "both parameter groups are rejected",
}


def _cmd_test(args) -> int:
    model = _model_from_args(args)
    obs = load_observations(args.obs)
    if args.T is None and abs(obs.T - model.T) > 1e-12:
        model = make_builtin(args.model, {"T": obs.T})
    hyp = Hypothesis.parse(args.hypothesis)
    init = _default_theta(args.model) if args.init == "true" else _parse_vector(args.init)
    report = run_test(obs, model, hyp, args.method, args.rho, args.delta, init,
                      mc_n=args.mc_n, seed=args.seed,
                      drift_variant=args.drift_variant)
    lines = [f"method: {args.method} (drift variant: {args.drift_variant})",
             f"hypothesis: {args.hypothesis}", f"level: {args.delta}"]
    for out in (report.drift, report.diffusion):
        if not out.applicable:
            lines.append(f"{out.which}: not applicable")
            continue
        lines.append(
            f"{out.which}: statistic={out.statistic:.6g} null={out.null_kind}"
            f"(dof={out.dof}) quantile={out.quantile:.6g} p={out.p_value:.4g} "
            f"-> {out.decision}")
    if report.case is not None:
        lines.append(f"joint judgement: case {report.case} ({_CASE_TEXT[report.case]})")
    text = "\n".join(lines)
    with open(args.out, "w") as fh:
        fh.write(text + "\n")
    print(text)
    return 0


def _cmd_experiment(args) -> int:
    cfg, extras = parse_config(args.config)
    summary = run_experiment(cfg)
    paths = write_summary(summary, args.outdir)
    if args.export_json:
        path = os.path.join(args.outdir, "config.json")
        with open(path, "w") as fh:
            fh.write(config_to_json(cfg) + "\n")
        paths["config"] = path
    for kind in extras.get("plot_data", []):
        emit_plot_data(summary, kind, os.path.join(args.outdir, "plots"))
    for name, path in paths.items():
        print(f"wrote {path}")
    for method in cfg.methods:
        st = summary.stats[method]
        mean = ", ".join(f"{v:.6g}" for v in st["mean"])
        print(f"{method}: mean=({mean}) replicates={st['count']} failures={st['failures']}")
    return 0


def _cmd_info(args) -> int:
    model = _model_from_args(args)
    theta = _parse_vector(args.theta) if args.theta else _default_theta(args.model)
    v = approximation_degree(args.rho)
    print(f"model: {model.name}")
    print(f"dimensions: d={model.d} r={model.r} p={model.p} q={model.q}"
          + (" (shared parameters)" if model.shared_params else ""))
    print(f"x0: {tuple(model.x0)}  T: {model.T}")
    print(f"rho={args.rho} -> expansion order v={v}")
    info = info_matrices(model, theta)
    def cond(mat):
        if mat.size == 0:
            return "n/a"
        return f"{np.linalg.cond(mat):.6g}"
    print(f"condition numbers at theta={tuple(theta)}:")
    print(f"  drift information: {cond(info.drift_fisher)}")
    print(f"  diffusion information: {cond(info.diffusion_fisher)}")
    print(f"  drift Gram: {cond(info.drift_gram)}")
    return 0


def run_cli(argv) -> int:
    """Entry point used by tests; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems; fold into the usage-error code
        return 0 if exc.code in (0, None) else 1
    handlers = {
        "simulate": _cmd_simulate,
        "estimate": _cmd_estimate,
        "test": _cmd_test,
        "experiment": _cmd_experiment,
        "info": _cmd_info,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
