"""Command-line interface.

Exit codes: 0 success (optimizer converged), 1 configuration or input error,
2 infeasible, 3 iteration limit reached, 4 bound validation failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .cgp import (FullOptimization, OptimizerOptions, OptStatus, baseline_optimize, optimize,
                  params_from_dict, params_to_dict)
from .dataio import (ConfigError, IdxError, RunConfig, config_from_dict, load_config, load_idx,
                     reference_config_path, report_json, save_report, write_sweep_csv)
from .estimate import estimate_ml_constants
from .problems import MLProblem, make_mnist_mlp, make_synthetic
from .sim import RecordLevel, convergence_metric, run_genqsgd
from .validation import bound_study

log = logging.getLogger("fedgp")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_MAXITER, EXIT_BOUND = 0, 1, 2, 3, 4
STATUS_EXIT = {OptStatus.CONVERGED: EXIT_OK, OptStatus.INFEASIBLE: EXIT_INFEASIBLE,
               OptStatus.MAX_ITERATIONS: EXIT_MAXITER}
MODES = ("constant", "exponential", "diminishing", "full")
BASELINES = ("none", "pm", "fa", "pr")
SWEEP_VARS = ("Cmax", "Tmax", "Fratio", "sratio")
REFERENCE_CONFIG = "reference"


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Shared helpers


def config_path(name: str) -> Path:
    """``reference`` names the bundled reference configuration; anything else is a path."""
    return reference_config_path() if name == REFERENCE_CONFIG else Path(name)


def _config(args) -> RunConfig:
    cfg = load_config(config_path(args.config))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _mode(cfg: RunConfig, name: str):
    if name == "full":
        return FullOptimization()
    if name not in cfg.steps:
        raise ConfigError(f"steps.{name}", "missing step-size parameters for this mode")
    return cfg.step_rule(name)


def _require_ml(cfg: RunConfig):
    if cfg.ml is None:
        raise ConfigError("ml", "constants not set; run estimate-constants first")
    return cfg.ml


def run_optimizer(cfg: RunConfig, mode: str, baseline: str = "none", F_ratio=None, s_ratio=None):
    overrides = {}
    if F_ratio is not None:
        overrides["F_ratio"] = F_ratio
    if s_ratio is not None:
        overrides["s_ratio"] = s_ratio
    sysp = cfg.profile(**overrides)
    opts = OptimizerOptions.from_mapping(cfg.optimizer)
    rule = _mode(cfg, mode)
    ml = _require_ml(cfg)
    if baseline == "none":
        return optimize(rule, sysp, ml, cfg.limits, opts)
    return baseline_optimize(baseline, rule, sysp, ml, cfg.limits, cfg.samples_per_worker, opts)


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def build_problem(cfg: RunConfig, source, kind: str | None = None) -> tuple[MLProblem, dict]:
    """Problem described by the config's ``simulation`` section.

    Returns the problem and extras (held-out data for accuracy, if any).
    """
    sim = cfg.simulation
    kind = kind or sim.get("problem")
    if kind is None:
        raise ConfigError("simulation.problem", "missing required field")
    dim = int(cfg.system["dim"])
    seed = int(sim.get("problem_seed", cfg.seed))
    extras = {}
    if kind in ("quadratic", "logistic"):
        spw = sim.get("samples_per_worker", 50)
        if not isinstance(spw, int) or spw < 1:
            raise ConfigError("simulation.samples_per_worker", "must be a positive integer")
        return make_synthetic(kind, dim, spw, cfg.N, seed), extras
    if kind == "mnist":
        base = Path(source).resolve().parent
        for key in ("images", "labels"):
            if key not in sim:
                raise ConfigError(f"simulation.{key}", "missing required field")
        images = load_idx(_resolve(base, sim["images"]), expect="images", scale=True)
        labels = load_idx(_resolve(base, sim["labels"]), expect="labels")
        problem = make_mnist_mlp(images, labels, cfg.N, seed, hidden=int(sim.get("hidden", 128)))
        if problem.dim != dim:
            raise ConfigError("system.dim", f"network has {problem.dim} parameters, config says {dim}")
        if "test_images" in sim and "test_labels" in sim:
            extras["test"] = (load_idx(_resolve(base, sim["test_images"]), expect="images", scale=True),
                              load_idx(_resolve(base, sim["test_labels"]), expect="labels"))
        return problem, extras
    raise ConfigError("simulation.problem", f"unknown problem {kind!r}")


def _emit(report: dict, out):
    if out:
        save_report(report, out)
    else:
        print(report_json(report))


# ---------------------------------------------------------------------------
# Commands


def cmd_optimize(args) -> int:
    cfg = _config(args)
    if args.t_max is not None or args.c_max is not None:
        cfg = cfg.with_limits(args.t_max, args.c_max)
    report = run_optimizer(cfg, args.mode, args.baseline)
    _emit(report.to_dict(), args.out)
    log.info("%s: status %s, energy %s", args.mode, report.status.value, report.rounded_energy)
    return STATUS_EXIT[report.status]


def _sweep_point(task) -> dict:
    cfg_dict, var, value, mode, baseline = task
    cfg = config_from_dict(cfg_dict)
    kwargs = {}
    if var == "Cmax":
        cfg = cfg.with_limits(C_max=value)
    elif var == "Tmax":
        cfg = cfg.with_limits(T_max=value)
    elif var == "Fratio":
        kwargs["F_ratio"] = value
    else:
        kwargs["s_ratio"] = value
    rep = run_optimizer(cfg, mode, baseline, **kwargs)
    row = {"sweep_var": var, "value": value, "mode": mode, "baseline": baseline,
           "status": rep.status.value,
           "relaxed_energy": rep.final.energy if rep.final is not None else math.inf}
    if rep.rounded is None:
        row["energy"] = math.inf
        if rep.status == OptStatus.CONVERGED:
            row["status"] = "RoundingFailed"
        return row
    p = params_to_dict(rep.rounded)
    row.update(energy=rep.rounded_energy, time=rep.rounded_time, conv_error=rep.rounded_conv_error,
               K0=p["K"][0], B=p["B"], gamma=p.get("gamma"), rho=p.get("rho"))
    row.update({f"K{n}": k for n, k in enumerate(p["K"][1:], start=1)})
    return row


def _parse_list(text: str, cast, name: str) -> list:
    try:
        items = [cast(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"--{name}: {exc}") from None
    if not items:
        raise UsageError(f"--{name} is empty")
    return items


def cmd_sweep(args) -> int:
    cfg = _config(args)
    _require_ml(cfg)
    grid = _parse_list(args.grid, float, "grid")
    if any(not (v > 0 and math.isfinite(v)) for v in grid):
        raise UsageError("--grid values must be positive and finite")
    unique = list(dict.fromkeys(grid))
    if len(unique) < len(grid):
        log.warning("dropped %d duplicate grid value(s)", len(grid) - len(unique))
    modes = _parse_list(args.modes, str, "modes")
    baselines = _parse_list(args.baselines, str, "baselines")
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}")
        _mode(cfg, m)
    for b in baselines:
        if b not in BASELINES:
            raise UsageError(f"unknown baseline {b!r}")
    tasks = [(cfg.to_dict(), args.var, v, m, b) for v in unique for m in modes for b in baselines]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_point, tasks))  # map keeps grid order
    else:
        rows = [_sweep_point(t) for t in tasks]
    if args.out:
        write_sweep_csv(rows, cfg.N, args.out)
    else:
        write_sweep_csv(rows, cfg.N, sys.stdout)
    return EXIT_OK


def _load_params(cfg: RunConfig, args):
    if args.params == "from-optimizer":
        rep = run_optimizer(cfg, args.mode, args.baseline)
        if rep.rounded is None:
            log.error("optimizer produced no integer parameters (%s)", rep.status.value)
            code = STATUS_EXIT[rep.status]
            return None, EXIT_INFEASIBLE if code == EXIT_OK else code
        return rep.rounded, EXIT_OK
    try:
        data = json.loads(Path(args.params).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read parameters: {exc}") from None
    if "rounded" in data:
        data = data["rounded"]
    return params_from_dict(data), EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if args.trials < 1:
        raise UsageError("--trials must be positive")
    problem, extras = build_problem(cfg, config_path(args.config), args.problem)
    params, code = _load_params(cfg, args)
    if params is None:
        return code
    if not params.is_integral():
        raise UsageError("simulation needs integer K and B")
    level = RecordLevel(args.record or cfg.simulation.get("record", "summary"))
    loss_every = int(cfg.simulation.get("loss_every", 1))
    sysp = cfg.profile()
    seeds = np.random.SeedSequence(cfg.seed).generate_state(args.trials, dtype=np.uint64)
    trials = []
    for s in seeds:
        traj = run_genqsgd(problem, params, sysp, int(s), level, loss_every=loss_every)
        rec = {"seed": int(s), "start_loss": traj.start_loss, "losses": traj.losses.tolist(),
               "final_loss": traj.final_loss, "bits_per_round": [r.bits for r in traj.rounds],
               "uplink_bits": traj.uplink_bits, "downlink_bits": traj.downlink_bits}
        if level != RecordLevel.SUMMARY:
            rec["convergence_metric"] = convergence_metric(traj, problem, params)
        if "test" in extras:
            rec["test_accuracy"] = problem.accuracy(traj.final_model, *extras["test"])
        trials.append(rec)
    _emit({"params": params_to_dict(params), "trials": trials}, args.out)
    return EXIT_OK


def cmd_estimate_constants(args) -> int:
    cfg = _config(args)
    if args.budget < 1:
        raise UsageError("--budget must be positive")
    problem, _ = build_problem(cfg, config_path(args.config), args.problem)
    ml = estimate_ml_constants(problem, args.budget, cfg.seed, safety=args.safety)
    out = cfg.to_dict()
    out["ml"] = {"L": ml.L, "sigma": ml.sigma, "G": ml.G, "f_init": ml.f_init,
                 "f_star_lb": ml.f_star_lb, "D": ml.D}
    out.pop("estimate", None)
    # keep fixed step sizes valid under the new smoothness estimate
    for mode, rule in out.get("steps", {}).items():
        if rule["gamma"] > 1.0 / ml.L:
            log.warning("steps.%s.gamma %.4g exceeds 1/L = %.4g; clipped", mode, rule["gamma"], 1 / ml.L)
            rule["gamma"] = 1.0 / ml.L
    config_from_dict(out)  # the written file must load back unchanged
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_validate_bound(args) -> int:
    cfg = _config(args)
    if args.trials < 1 or args.instances < 1:
        raise UsageError("--trials and --instances must be positive")
    problem, _ = build_problem(cfg, config_path(args.config), args.problem)
    study = bound_study(problem, args.instances, args.trials, cfg.seed, jobs=args.jobs, fallback=cfg.ml)
    failure = 1.0 - study.pass_rate
    report = {"instances": [dict(params=params_to_dict(p), levels=[str(s) for s in sp.s], **r.to_dict())
                            for (p, sp), r in zip(study.configs, study.reports)],
              "pass_rate": study.pass_rate, "strict_pass_rate": study.strict_pass_rate,
              "max_failure_rate": args.max_failure_rate, "passed": failure <= args.max_failure_rate}
    _emit(report, args.out)
    return EXIT_OK if report["passed"] else EXIT_BOUND


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output path (default: stdout)"):
        p.add_argument("--config", required=True,
                       help="JSON run configuration, or 'reference' for the bundled one")
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int, help="root seed (default: the config's seed)")

    p = sub.add_parser("optimize", help="energy-optimal algorithm parameters")
    common(p)
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--baseline", choices=BASELINES, default="none")
    p.add_argument("--t-max", type=float, help="override the time limit")
    p.add_argument("--c-max", type=float, help="override the convergence-error limit")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("sweep", help="optimize over a grid of one system or limit value")
    common(p, "CSV output path (default: stdout)")
    p.add_argument("--var", choices=SWEEP_VARS, required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--modes", default="constant", help="comma-separated modes")
    p.add_argument("--baselines", default="none", help="comma-separated baselines")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", help="run the training algorithm")
    common(p)
    p.add_argument("--params", required=True, help="parameter JSON, optimizer report, or 'from-optimizer'")
    p.add_argument("--mode", choices=MODES, default="constant", help="mode for --params from-optimizer")
    p.add_argument("--baseline", choices=BASELINES, default="none")
    p.add_argument("--problem", choices=("quadratic", "logistic", "mnist"))
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--record", choices=[lvl.value for lvl in RecordLevel])
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate-constants", help="sample smoothness and gradient constants")
    common(p, "config path to write (default: stdout)")
    p.add_argument("--problem", choices=("quadratic", "logistic", "mnist"))
    p.add_argument("--budget", type=int, required=True, help="gradient-difference pairs to sample")
    p.add_argument("--safety", type=float, default=1.1)
    p.set_defaults(func=cmd_estimate_constants)

    p = sub.add_parser("validate-bound", help="check the convergence bound by simulation")
    common(p)
    p.add_argument("--problem", choices=("quadratic", "logistic", "mnist"))
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--max-failure-rate", type=float, default=0.05)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_validate_bound)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error at %s", exc)
        return EXIT_CONFIG
    except (UsageError, IdxError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
