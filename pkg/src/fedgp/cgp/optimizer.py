"""Successive geometric programming for the energy-minimization problems."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from ..costs import (AlgorithmParams, ArbitraryStep, ConstantStep, DiminishingStep, ExponentialStep,
                     Limits, MLConstants, SystemProfile, conv_error, energy_cost, time_cost)
from ..gp import (GeoProgram, Monomial, Point, Posynomial, SolverOptions, Status, eval_posynomial,
                  solve_gp, to_convex_form, var)
from .rounding import RoundingFailed, round_to_integers
from .templates import Mode, Template, build_equivalent, mode_name


ENERGY_SLACK = 1e-12


class OptStatus(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    INFEASIBLE = "Infeasible"


class Infeasible(RuntimeError):
    def __init__(self, message: str, violation: float = math.inf):
        super().__init__(message)
        self.violation = violation


@dataclass
class OptimizerOptions:
    rel_tol: float = 1e-6
    max_outer: int = 200
    feas_tol: float = 1e-9
    round_feas_tol: float = 1e-9
    init_rounds: int = 60
    kkt_tol: float = 1e-4
    kkt_stop: float = 1e-5
    gp: SolverOptions = field(default_factory=SolverOptions)

    @classmethod
    def from_mapping(cls, m) -> "OptimizerOptions":
        keys = {"rel_tol", "max_outer", "feas_tol", "round_feas_tol", "init_rounds", "kkt_tol", "kkt_stop"}
        return cls(**{k: v for k, v in dict(m or {}).items() if k in keys})


@dataclass
class Iterate:
    K: tuple[float, ...]
    B: float
    T1: float
    T2: float
    X0: float | None
    gamma: float | None
    energy: float
    point: dict

    @classmethod
    def from_point(cls, tpl: Template, x: Point) -> "Iterate":
        return cls(K=tuple(float(x[f"K{n}"]) for n in range(tpl.N + 1)), B=float(x["B"]),
                   T1=float(x["T1"]), T2=float(x["T2"]), X0=x.get("X0"), gamma=x.get("gamma"),
                   energy=tpl.energy(x), point=dict(x))


@dataclass
class OptimizerReport:
    mode: str
    baseline: str | None
    status: OptStatus
    final: Iterate | None
    rounded: AlgorithmParams | None
    energy_trace: list[float]
    kkt_residual: float
    iterations: int
    rounded_energy: float = math.nan
    rounded_time: float = math.nan
    rounded_conv_error: float = math.nan
    message: str = ""
    iterates: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"mode": self.mode, "baseline": self.baseline or "none", "status": self.status.value,
               "energy_trace": list(self.energy_trace), "kkt_residual": self.kkt_residual,
               "iterations": self.iterations, "message": self.message}
        if self.final is not None:
            out["final"] = {"K": list(self.final.K), "B": self.final.B, "T1": self.final.T1,
                            "T2": self.final.T2, "X0": self.final.X0, "gamma": self.final.gamma,
                            "energy": self.final.energy,
                            "l": self.final.point.get("l")}
        if self.rounded is not None:
            out["rounded"] = params_to_dict(self.rounded)
            out["rounded"].update(energy=self.rounded_energy, time=self.rounded_time,
                                  conv_error=self.rounded_conv_error)
        return out


def params_to_dict(p: AlgorithmParams) -> dict:
    rule = p.rule
    d = {"K": [int(k) if float(k).is_integer() else k for k in p.K],
         "B": int(p.B) if float(p.B).is_integer() else p.B,
         "rule": type(rule).__name__.replace("Step", "").lower()}
    if hasattr(rule, "gamma"):
        d["gamma"] = rule.gamma
    if hasattr(rule, "rho"):
        d["rho"] = rule.rho
    if hasattr(rule, "gammas"):
        d["gammas"] = list(rule.gammas)
    return d


def params_from_dict(d) -> AlgorithmParams:
    """Inverse of ``params_to_dict``; also accepts an optimizer report's ``rounded`` entry."""
    try:
        kind = d.get("rule", "constant")
        if kind == "constant":
            rule = ConstantStep(float(d["gamma"]))
        elif kind == "exponential":
            rule = ExponentialStep(float(d["gamma"]), float(d["rho"]))
        elif kind == "diminishing":
            rule = DiminishingStep(float(d["gamma"]), float(d["rho"]))
        elif kind == "arbitrary":
            rule = ArbitraryStep(tuple(d["gammas"]))
        else:
            raise ValueError(f"unknown step-size rule {kind!r}")
        return AlgorithmParams(tuple(d["K"]), d["B"], rule)
    except KeyError as exc:
        raise ValueError(f"parameter record is missing {exc.args[0]!r}") from None


# ---------------------------------------------------------------------------
# Approximate GP


def build_approx_gp(tpl: Template, ref: Point) -> GeoProgram:
    """Standard GP whose constraints are tangent inner approximations at ``ref``."""
    ineqs = [c.surrogate(ref) for c in tpl.all_constraints]
    names = [c.name for c in tpl.all_constraints]
    return GeoProgram(tpl.variables, tpl.objective, tuple(ineqs), tuple(tpl.equalities),
                      hints=tpl.hints, constraint_names=tuple(names))


# ---------------------------------------------------------------------------
# Initialization


CENTER_LOCAL = (1.0, 2.0, 3.0, 5.0, 8.0, 13.0)
CENTER_BATCH = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0)
CENTER_GAMMA_FRACTIONS = (1.0, 0.3, 0.1, 0.03, 0.01, 3e-3, 1e-3, 3e-4, 1e-4)
CENTER_MARGIN = 1e-3


def _center_grid(tpl: Template):
    """Coarse (K, B[, gamma, l]) guesses with K0 left open."""
    locals_ = (1.0,) if tpl.baseline == "pm" else CENTER_LOCAL
    batches = (1.0,) if tpl.baseline == "pr" else CENTER_BATCH
    gammas = [f / tpl.ml.L for f in CENTER_GAMMA_FRACTIONS] if "gamma" in tpl.variables else [None]
    for g in gammas:
        if tpl.baseline == "fa":
            for l in (1.0, 2.0, 4.0):
                for B in batches:
                    x = {f"K{n}": l * float(tpl.samples[n - 1]) / B for n in range(1, tpl.N + 1)}
                    if min(x.values()) < 1.0:
                        continue
                    x.update(B=B, l=l)
                    yield x, g
        else:
            for k in locals_:
                for B in batches:
                    x = {f"K{n}": k for n in range(1, tpl.N + 1)}
                    x["B"] = B
                    yield x, g


def _limits_ok(tpl: Template, x: Point, margin: float) -> bool:
    return all(c.value(x) <= (1.0 - margin if c.name == "convergence" else 1.0 + 1e-12)
               for c in tpl.all_constraints)


def _heuristic_center(tpl: Template) -> dict:
    """Cheapest grid guess whose smallest admissible K0 meets every limit.

    For each (K, B) on a coarse grid, K0 is the smallest value (found by
    bisection in log K0) that brings the convergence constraint below
    ``1 - CENTER_MARGIN`` within the time budget. Falls back to unit local
    work and half the time budget when no grid point qualifies.
    """
    best, best_energy = None, math.inf
    for partial, gamma in _center_grid(tpl):
        x = dict(partial)
        if gamma is not None:
            x["gamma"] = gamma
        x["K0"] = 1.0
        x = tpl.tighten(x)
        per_round = tpl.sys.comm_overhead() + x["B"] * x["T1"]
        hi = tpl.limits.T_max / per_round
        if hi < 1.0:
            continue
        x["K0"] = hi * (1 - 1e-9)
        x = tpl.tighten(x)
        if not _limits_ok(tpl, x, CENTER_MARGIN):
            continue
        lo_log, hi_log = 0.0, math.log(x["K0"])
        x["K0"] = 1.0
        if not _limits_ok(tpl, tpl.tighten(x), CENTER_MARGIN):
            for _ in range(60):
                mid = 0.5 * (lo_log + hi_log)
                x["K0"] = math.exp(mid)
                if _limits_ok(tpl, tpl.tighten(x), CENTER_MARGIN):
                    hi_log = mid
                else:
                    lo_log = mid
            x["K0"] = math.exp(hi_log)
        x = tpl.tighten(x)
        if not _limits_ok(tpl, x, CENTER_MARGIN):
            continue
        e = tpl.energy(x)
        if e < best_energy:
            best, best_energy = x, e
    if best is not None:
        return best
    x = {f"K{n}": 1.0 for n in range(1, tpl.N + 1)}
    x["B"] = 1.0
    if "gamma" in tpl.variables:
        x["gamma"] = 0.5 / tpl.ml.L
    if "l" in tpl.variables:
        x["l"] = 1.0
        x["B"] = float(np.max(tpl.samples))
        for n in range(1, tpl.N + 1):
            x[f"K{n}"] = max(1.0, float(tpl.samples[n - 1]) / x["B"])
    x["K0"] = 1.0
    x = tpl.tighten(x)
    per_round = tpl.sys.comm_overhead() + x["B"] * x["T1"]
    x["K0"] = max(1.0, 0.5 * tpl.limits.T_max / per_round)
    return tpl.tighten(x)


def find_initial_feasible(tpl: Template, opts: OptimizerOptions | None = None) -> dict:
    """A point feasible for the equivalent problem, with T1 and T2 tight.

    Constraints violated at the current center get a common slack level
    ``s``; the rest stay hard. Each round condenses everything at the center
    and solves ``min s``; the center moves to the minimizer. Raises
    ``Infeasible`` when ``s`` stalls above one.
    """
    opts = opts or OptimizerOptions()
    center = _heuristic_center(tpl)
    s_name = "_phase1_level"
    svar = var(s_name)
    variables = tpl.variables + (s_name,)
    hints = dict(tpl.hints)
    hints[s_name] = (0.5, 10.0)
    cons = tpl.all_constraints
    prev = math.inf
    for _ in range(opts.init_rounds):
        if tpl.violation(center) <= opts.feas_tol:
            return center
        values = [c.value(center) for c in cons]
        ineqs = []
        for c, v in zip(cons, values):
            g = c.surrogate(center)
            ineqs.append(g / svar if v > 1.0 else g)
        ineqs.append(Posynomial([Monomial(0.5, {s_name: -1.0})]))
        gp = GeoProgram(variables, Posynomial([svar]), tuple(ineqs), tuple(tpl.equalities), hints=hints)
        start = dict(center)
        start[s_name] = 1.01 * max(values)
        sol = solve_gp(gp, opts.gp, start=start)
        if sol.status not in (Status.OPTIMAL, Status.MAX_ITERATIONS):
            break
        level = sol.objective_value
        x = tpl.tighten({k: v for k, v in sol.point.items() if k != s_name})
        if tpl.violation(x) <= tpl.violation(center) or tpl.violation(x) <= opts.feas_tol:
            center = x
        if level >= prev * (1 - 1e-6) and level > 1.0:
            break
        prev = level
    viol = tpl.violation(center)
    if viol <= opts.feas_tol:
        return center
    raise Infeasible(f"no feasible point found (smallest violation {viol:.3g})", viol)


# ---------------------------------------------------------------------------
# KKT residual of the equivalent problem


def _log_grad(fun, y: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(y)
    for i in range(y.size):
        yp, ym = y.copy(), y.copy()
        yp[i] += h
        ym[i] -= h
        g[i] = (math.log(fun(yp)) - math.log(fun(ym))) / (2 * h)
    return g


def kkt_residual_equivalent(tpl: Template, x: Point, multipliers) -> float:
    """Log-space KKT residual of the equivalent problem at ``x``.

    Stationarity of ``log E + sum lam_i log g_i`` (projected off the monomial
    equality normals), complementary slackness ``lam_i |log g_i|``, and
    primal violation.
    """
    names = tpl.variables
    y = np.array([math.log(x[k]) for k in names])

    def point(yv):
        return {k: math.exp(v) for k, v in zip(names, yv)}

    lam = np.asarray(multipliers, dtype=float)
    cons = tpl.all_constraints
    grad = _log_grad(lambda yv: eval_posynomial(tpl.objective, point(yv)), y)
    comp = 0.0
    viol = 0.0
    for c, li in zip(cons, lam):
        gval = c.tangent_form(x, x)
        grad = grad + li * _log_grad(lambda yv, c=c: c.tangent_form(point(yv), x), y)
        comp = max(comp, abs(li * math.log(gval)))
        viol = max(viol, math.log(gval))
    if tpl.equalities:
        cf = to_convex_form(GeoProgram(names, tpl.objective, (), tuple(tpl.equalities)))
        nu = np.linalg.lstsq(cf.eq_C.T, -grad, rcond=None)[0]
        grad = grad + cf.eq_C.T @ nu
        viol = max(viol, float(np.max(np.abs(cf.equalities(y)))))
    return max(float(np.max(np.abs(grad))), comp, viol)


# ---------------------------------------------------------------------------
# Outer loop


def run_gia(tpl: Template, opts: OptimizerOptions | None = None,
            start: Point | None = None) -> tuple[dict, list[float], list[dict], float, OptStatus]:
    """Iterate approximate GPs from a feasible start.

    Stops once the relative energy change stays below ``rel_tol`` for two
    consecutive iterations and the KKT residual is at most ``kkt_stop``.
    A step that would raise the energy or leave the feasible set is
    discarded and ends the loop. Returns (final point, energy trace,
    iterates, KKT residual, status).
    """
    opts = opts or OptimizerOptions()
    x = dict(start) if start is not None else find_initial_feasible(tpl, opts)
    trace = [tpl.energy(x)]
    iterates = [dict(x)]
    lam = None
    kkt = math.inf
    small = 0
    for _ in range(opts.max_outer):
        sol = solve_gp(build_approx_gp(tpl, x), opts.gp, start=x)
        if sol.status is Status.INFEASIBLE:
            break
        xn = tpl.tighten(sol.point)
        en = tpl.energy(xn)
        if not tpl.is_feasible(xn, opts.feas_tol) or en > trace[-1] * (1 + ENERGY_SLACK):
            break
        change = abs(trace[-1] - en) / max(abs(trace[-1]), 1e-300)
        x, lam = xn, sol.multipliers
        trace.append(en)
        iterates.append(dict(x))
        small = small + 1 if change < opts.rel_tol else 0
        if small >= 2:
            kkt = kkt_residual_equivalent(tpl, x, lam)
            if kkt <= opts.kkt_stop:
                return x, trace, iterates, kkt, OptStatus.CONVERGED
    if lam is not None:
        kkt = kkt_residual_equivalent(tpl, x, lam)
    status = OptStatus.CONVERGED if kkt <= opts.kkt_tol else OptStatus.MAX_ITERATIONS
    return x, trace, iterates, kkt, status


def optimize(mode: Mode, sys: SystemProfile, ml: MLConstants, limits: Limits,
             opts: OptimizerOptions | None = None, baseline: str | None = None,
             samples_per_worker=None) -> OptimizerReport:
    """Energy-minimizing K, B (and step size in full mode) under time and error limits."""
    opts = opts or OptimizerOptions()
    tpl = build_equivalent(mode, sys, ml, limits, baseline, samples_per_worker)
    name = mode_name(mode)
    try:
        x0 = find_initial_feasible(tpl, opts)
    except Infeasible as exc:
        return OptimizerReport(name, tpl.baseline, OptStatus.INFEASIBLE, None, None, [], math.inf, 0,
                               message=str(exc))
    x, trace, iterates, kkt, status = run_gia(tpl, opts, x0)
    report = OptimizerReport(name, tpl.baseline, status, Iterate.from_point(tpl, x), None, trace, kkt,
                             len(trace) - 1, iterates=iterates)
    try:
        rounded = round_to_integers(tpl, x, tol=opts.round_feas_tol)
    except RoundingFailed as exc:
        report.message = str(exc)
        return report
    report.rounded = rounded
    report.rounded_energy = energy_cost(rounded, sys)
    report.rounded_time = time_cost(rounded, sys)
    report.rounded_conv_error = conv_error(rounded, sys, ml)
    return report


def baseline_optimize(baseline: str, mode: Mode, sys: SystemProfile, ml: MLConstants, limits: Limits,
                      samples_per_worker=None, opts: OptimizerOptions | None = None) -> OptimizerReport:
    """``optimize`` with the baseline's structural equalities (pm, fa, pr)."""
    if baseline not in ("pm", "fa", "pr"):
        raise ValueError(f"unknown baseline {baseline!r}")
    return optimize(mode, sys, ml, limits, opts, baseline=baseline, samples_per_worker=samples_per_worker)
