"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line (visible even without ``-s``)
and then asserts, so ``pytest tests/test_acceptance.py -v`` doubles as the
acceptance report. Runtime budgets are part of each pass condition.
"""

import itertools
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from fedgp.cgp import (FullOptimization, baseline_optimize, build_equivalent, condense_posynomial,
                       find_initial_feasible, optimize)
from fedgp.costs import (AlgorithmParams, ArbitraryStep, ConstantStep, DiminishingStep,
                         ExponentialStep, Limits, MLConstants, SystemProfile, conv_error,
                         conv_error_constant, conv_error_diminishing, conv_error_exponential,
                         conv_error_general, derived_constants, energy_cost, time_cost)
from fedgp.dataio import load_idx
from fedgp.gp import GeoProgram, Monomial, Posynomial, Status, eval_posynomial, solve_gp, var
from fedgp.problems import make_mnist_mlp, make_synthetic
from fedgp.quantizer import Quantizer, variance_factor
from fedgp.sim import RecordLevel, run_genqsgd
from fedgp.validation import bound_study

from test_costs import explicit_ca, small_profile
from test_sim import profile, reference_pm_sgd, reference_pr_sgd, reference_sgd, same_path

DATA = Path(__file__).parent / "data"
MODES = ["constant", "exponential", "diminishing", "full"]


@pytest.fixture
def report(capsys):
    """Print one verdict line, then fail the test if the check did not pass."""
    def emit(number: int, title: str, ok: bool, detail: str, started: float, budget: float):
        elapsed = time.perf_counter() - started
        ok = bool(ok) and elapsed <= budget
        verdict = "PASS" if ok else "FAIL"
        with capsys.disabled():
            print(f"\n{verdict} [{number:02d}] {title}: {detail} ({elapsed:.1f} s of {budget:.0f} s)")
        assert ok, detail
    return emit


def mode_of(cfg, name):
    return FullOptimization() if name == "full" else cfg.step_rule(name)


def test_01_constant_steps_minimize_the_bound(report):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = -math.inf
    for _ in range(100):
        N = int(rng.integers(1, 5))
        sys = small_profile(rng, N)
        ml = MLConstants(float(rng.uniform(0.05, 2)), float(rng.uniform(0.1, 40)),
                         float(rng.uniform(0.1, 40)), float(rng.uniform(1, 5)))
        K0 = int(rng.integers(1, 9))
        K = (K0,) + tuple(int(k) for k in rng.integers(1, 20, N))
        B = float(rng.integers(1, 64))
        cap = 1.0 / ml.L
        S = float(rng.uniform(0.01, 1.0)) * K0 * cap
        const = conv_error_general(AlgorithmParams(K, B, ArbitraryStep((S / K0,) * K0)), sys, ml)
        for _ in range(1000):
            # random point of the simplex, pulled toward the constant sequence
            # just enough to respect the 1/L cap
            d = rng.dirichlet(np.full(K0, float(rng.choice([0.3, 1.0, 5.0])))) * S
            lam = 1.0 if d.max() <= cap else (cap - S / K0) / (d.max() - S / K0)
            w = S / K0 + lam * (d - S / K0)
            w = np.clip(w, 1e-300, cap)
            seq = conv_error_general(AlgorithmParams(K, B, ArbitraryStep(tuple(w))), sys, ml)
            worst = max(worst, (const - seq) / seq)
    report(1, "constant step sequence minimizes the bound for a fixed sum",
           worst <= 1e-12, f"100 instances x 1000 sequences, max relative excess {worst:.2e}",
           start, 30)


def test_02_closed_forms_match_explicit_sums(report):
    start = time.perf_counter()
    rng = np.random.default_rng(102)
    worst_c = worst_e = 0.0
    dim_gap = math.inf
    for _ in range(100):
        N = int(rng.integers(1, 6))
        sys = small_profile(rng, N)
        ml = MLConstants(float(rng.uniform(0.05, 2)), float(rng.uniform(0.1, 40)),
                         float(rng.uniform(0.1, 40)), float(rng.uniform(1, 5)))
        c = derived_constants(ml, N)
        q = sys.q_combined()
        K0 = int(rng.integers(1, 2000))
        K = (K0,) + tuple(int(k) for k in rng.integers(1, 30, N))
        B = float(rng.integers(1, 64))
        g = float(rng.uniform(1e-3, 1.0)) / ml.L
        rho = float(rng.uniform(0.9, 0.9999))
        exp_seq = [g * rho ** (k - 1) for k in range(1, K0 + 1)]
        dim_rho = float(rng.uniform(0.1, 1000))
        dim_seq = [dim_rho * g / (k + dim_rho) for k in range(1, K0 + 1)]

        got = conv_error_constant(AlgorithmParams(K, B, ConstantStep(g)), sys, ml)
        worst_c = max(worst_c, abs(got / explicit_ca(K, B, [g] * K0, q, c) - 1))
        got = conv_error_exponential(AlgorithmParams(K, B, ExponentialStep(g, rho)), sys, ml)
        worst_e = max(worst_e, abs(got / explicit_ca(K, B, exp_seq, q, c) - 1))
        got = conv_error_diminishing(AlgorithmParams(K, B, DiminishingStep(g, dim_rho)), sys, ml)
        dim_gap = min(dim_gap, got / explicit_ca(K, B, dim_seq, q, c) - 1)
    ok = worst_c <= 1e-10 and worst_e <= 1e-10 and dim_gap > 0
    report(2, "closed-form bounds against explicit step sums", ok,
           f"constant {worst_c:.1e}, exponential {worst_e:.1e}, diminishing margin min {dim_gap:.2e}",
           start, 10)


def test_03_gp_solver_on_analytic_programs(report):
    start = time.perf_counter()
    u, v = var("u"), var("v")
    errors = []
    # min u/v + v  s.t.  2/u <= 1  ->  u = 2, v = sqrt(2), value 2 sqrt(2)
    sol = solve_gp(GeoProgram(("u", "v"), u / v + v, (2 * u ** -1,)))
    errors.append(abs(sol.objective_value / (2 * math.sqrt(2)) - 1) if sol.status is Status.OPTIMAL else math.inf)
    # AM-GM pair: min u + v  s.t.  1/(u v) <= 1  ->  2
    sol = solve_gp(GeoProgram(("u", "v"), u + v, (u ** -1 * v ** -1,)))
    errors.append(abs(sol.objective_value / 2 - 1) if sol.status is Status.OPTIMAL else math.inf)
    # symmetric: min sum x_i  s.t.  prod x_i >= 3^n  ->  3 n
    n = 8
    names = tuple(f"x{i}" for i in range(n))
    sol = solve_gp(GeoProgram(names, Posynomial([var(k) for k in names]),
                              (Monomial(3.0 ** n, {k: -1.0 for k in names}),)))
    errors.append(abs(sol.objective_value / (3 * n) - 1) if sol.status is Status.OPTIMAL else math.inf)
    infeasible = solve_gp(GeoProgram(("u",), u, (2 * u ** -1,), upper_bounds={"u": 1.0}))
    ok = max(errors) <= 1e-6 and infeasible.status is Status.INFEASIBLE
    report(3, "GP solver optima and infeasibility certificate", ok,
           f"max relative error {max(errors):.1e}, infeasible fixture -> {infeasible.status.value}",
           start, 5)


@pytest.mark.parametrize("mode", MODES)
def test_04_inner_approximation_mechanics(mode, report, reference_config, reference_profile):
    start = time.perf_counter()
    cfg = reference_config
    r = optimize(mode_of(cfg, mode), reference_profile, cfg.ml, cfg.limits)
    tpl = build_equivalent(mode_of(cfg, mode), reference_profile, cfg.ml, cfg.limits)
    monotone = all(b <= a * (1 + 1e-9) for a, b in zip(r.energy_trace, r.energy_trace[1:]))
    feasible = all(tpl.is_feasible(x, 1e-9) for x in r.iterates)
    rounded_ok = (r.rounded is not None
                  and time_cost(r.rounded, reference_profile) <= cfg.limits.T_max * (1 + 1e-9)
                  and conv_error(r.rounded, reference_profile, cfg.ml) <= cfg.limits.C_max * (1 + 1e-9))
    ok = monotone and feasible and r.kkt_residual <= 1e-4 and rounded_ok
    report(4, f"optimizer mechanics ({mode})", ok,
           f"{r.iterations} iterations, trace non-increasing={monotone}, iterates feasible={feasible}, "
           f"KKT {r.kkt_residual:.1e}, rounded point meets limits={rounded_ok}", start, 120)


def _log_grad(f, x, names, h=1e-6):
    out = []
    for k in names:
        xp, xm = dict(x), dict(x)
        xp[k] *= math.exp(h)
        xm[k] *= math.exp(-h)
        out.append((f(xp) - f(xm)) / (2 * h))
    return np.array(out)


def test_05_surrogates_are_tangent_upper_bounds(report, reference_config, reference_profile):
    start = time.perf_counter()
    cfg = reference_config
    rng = np.random.default_rng(105)
    worst_value = worst_grad = 0.0
    below = 0
    # condensation: monomial lower bound of a posynomial, tangent at the reference
    names = ("a", "b", "c")
    for _ in range(20):
        g = Posynomial([Monomial(float(np.exp(rng.normal())),
                                 {k: float(rng.integers(-3, 4)) for k in names})
                        for _ in range(int(rng.integers(2, 6)))])
        ref = {k: float(np.exp(rng.normal())) for k in names}
        m = condense_posynomial(g, ref)
        worst_value = max(worst_value, abs(m(ref) / g(ref) - 1))
        gm, gg = _log_grad(m, ref, names), _log_grad(g, ref, names)
        worst_grad = max(worst_grad, float(np.max(np.abs(gm - gg))) / max(1.0, float(np.max(np.abs(gg)))))
        for _ in range(1000):
            x = {k: ref[k] * float(np.exp(rng.uniform(-2, 2))) for k in names}
            below += m(x) > g(x) * (1 + 1e-12)
    # every constraint surrogate of every mode upper-bounds its exact form
    above = 0
    for mode in MODES:
        tpl = build_equivalent(mode_of(cfg, mode), reference_profile, cfg.ml, cfg.limits)
        base = find_initial_feasible(tpl)
        vars_ = tpl.variables
        ref = {k: base[k] * float(np.exp(rng.uniform(-0.5, 0.5))) for k in vars_}
        if "X0" in ref:
            ref["X0"] = min(ref["X0"], 0.99)
        pts = [{k: ref[k] * float(np.exp(rng.uniform(-2, 2))) for k in vars_} for _ in range(1000)]
        for c in tpl.all_constraints:
            sur = c.surrogate(ref)
            exact = c.tangent_form(ref, ref)
            worst_value = max(worst_value, abs(eval_posynomial(sur, ref) / exact - 1))
            gs = _log_grad(lambda x: eval_posynomial(sur, x), ref, vars_)
            ge = _log_grad(lambda x: c.tangent_form(x, ref), ref, vars_)
            worst_grad = max(worst_grad, float(np.max(np.abs(gs - ge))) / max(1.0, float(np.max(np.abs(ge)))))
            for x in pts:
                t = c.tangent_form(x, ref)
                above += eval_posynomial(sur, x) < t - 1e-9 * max(1.0, abs(t))
    ok = worst_value <= 1e-9 and worst_grad <= 1e-5 and below == 0 and above == 0
    report(5, "condensation and surrogate constraints", ok,
           f"value gap {worst_value:.1e}, gradient gap {worst_grad:.1e}, bound violations {below + above}",
           start, 30)


def test_06_small_instance_matches_grid_search(report):
    start = time.perf_counter()
    ones = np.ones(2)
    sys = SystemProfile(F=ones, p=ones, r=ones, s=(16, 16), C=ones, alpha=ones, dim=4,
                        M_table={16: 16.0})
    ml = MLConstants(L=1.0, sigma=4.0, G=1.0, f_init=1.0)
    limits = Limits(T_max=1e6, C_max=0.8)
    rule = ConstantStep(0.2)
    best = (math.inf, None)
    for K0, K1, B in itertools.product(range(1, 31), range(1, 31), range(1, 65)):
        p = AlgorithmParams((K0, K1), B, rule)
        if time_cost(p, sys) <= limits.T_max and conv_error(p, sys, ml) <= limits.C_max:
            best = min(best, (energy_cost(p, sys), (K0, K1, B)))
    r = optimize(rule, sys, ml, limits)
    gap = r.rounded_energy / best[0] - 1 if r.rounded is not None else math.inf
    K = tuple(int(k) for k in r.rounded.K) + (int(r.rounded.B),) if r.rounded is not None else None
    report(6, "one-worker instance against exhaustive grid", gap <= 0.02,
           f"grid optimum {best[0]:g} at (K0, K1, B)={best[1]}, optimizer {r.rounded_energy:g} at {K}, "
           f"gap {100 * gap:.2f}%", start, 120)


def _non_increasing_with_a_drop(values):
    steps = list(zip(values, values[1:]))
    return (all(math.isfinite(a) for a in values)
            and all(b <= a * (1 + 1e-9) for a, b in steps)
            and any(b < a * (1 - 1e-6) for a, b in steps))


def test_07_energy_falls_as_limits_loosen(report, reference_config, reference_profile):
    start = time.perf_counter()
    cfg = reference_config
    c_grid = [0.15, 0.2, 0.25, 0.3, 0.4]
    t_grid = [5e3, 1e4, 2e4, 5e4, 1e5]
    lines, ok = [], True
    for mode in MODES:
        rule = mode_of(cfg, mode)
        by_c = [optimize(rule, reference_profile, cfg.ml, Limits(T_max=1e4, C_max=c)) for c in c_grid]
        by_t = [optimize(rule, reference_profile, cfg.ml, Limits(T_max=t, C_max=0.2)) for t in t_grid]
        ec = [r.final.energy if r.final is not None else math.inf for r in by_c]
        et = [r.final.energy if r.final is not None else math.inf for r in by_t]
        good = _non_increasing_with_a_drop(ec) and _non_increasing_with_a_drop(et)
        ok &= good
        lines.append(f"{mode}: C-sweep {ec[0]:.0f}->{ec[-1]:.0f}, T-sweep {et[0]:.0f}->{et[-1]:.0f}")
    report(7, "energy non-increasing in the error and time limits", ok, "; ".join(lines), start, 600)


def test_08_more_freedom_never_costs_energy(report, reference_config):
    start = time.perf_counter()
    cfg = reference_config
    rule = cfg.step_rule("constant")
    assert rule == ConstantStep(0.01)
    ratios = [1.0, 2.0, 5.0, 10.0]
    table = {name: [] for name in ("full", "constant", "pm", "pr", "fa", "fa-small")}
    for ratio in ratios:
        sys = cfg.profile(F_ratio=ratio)
        runs = {"full": optimize(FullOptimization(), sys, cfg.ml, cfg.limits),
                "constant": optimize(rule, sys, cfg.ml, cfg.limits),
                "pm": baseline_optimize("pm", rule, sys, cfg.ml, cfg.limits),
                "pr": baseline_optimize("pr", rule, sys, cfg.ml, cfg.limits),
                "fa": baseline_optimize("fa", rule, sys, cfg.ml, cfg.limits,
                                        samples_per_worker=cfg.samples_per_worker),
                # a smaller local data set keeps the coupled baseline feasible
                "fa-small": baseline_optimize("fa", rule, sys, cfg.ml, cfg.limits,
                                              samples_per_worker=60)}
        for name, r in runs.items():
            table[name].append(r.final.energy if r.final is not None else math.inf)
    slack = 1 + 1e-6
    nested = all(table["full"][i] <= table["constant"][i] * slack
                 and all(table["constant"][i] <= table[b][i] * slack for b in ("pm", "pr", "fa", "fa-small"))
                 for i in range(len(ratios)))
    trend = all(b >= a * (1 - 1e-6) or (math.isinf(a) and math.isinf(b))
                for name in ("pm", "pr", "fa", "fa-small")
                for a, b in zip(table[name], table[name][1:]))
    detail = ", ".join(f"{k} " + "/".join("inf" if math.isinf(e) else f"{e:.0f}" for e in v)
                       for k, v in table.items())
    report(8, "energy ordering full <= constant <= baselines, baselines grow with speed spread",
           nested and trend, detail, start, 900)


def test_09_quantizer_contract(report):
    start = time.perf_counter()
    draws = 100_000
    worst_z = 0.0
    ratio = 0.0
    for D, s in itertools.product((16, 256), (2, 4, 16)):
        rng = np.random.default_rng(109 + 10 * D + s)
        y = rng.normal(size=D)
        q = Quantizer(s)
        out = np.empty((draws, D))
        for i in range(draws):
            out[i] = q.quantize(y, rng)[0]
        se = out.std(axis=0, ddof=1) / math.sqrt(draws)
        dev = np.abs(out.mean(axis=0) - y)
        random_coords = se > 0
        if np.any(dev[~random_coords] > 1e-12):
            worst_z = math.inf
        if np.any(random_coords):
            worst_z = max(worst_z, float(np.max(dev[random_coords] / se[random_coords])))
        mse = float(np.mean(np.sum((out - y) ** 2, axis=1)))
        ratio = max(ratio, mse / (variance_factor(s, D) * float(y @ y)))
    report(9, "quantizer unbiased with bounded variance", worst_z <= 4 and ratio <= 1,
           f"max |bias|/SE {worst_z:.2f}, max MSE / (q ||y||^2) {ratio:.3f}", start, 60)


def test_10_reductions_are_bit_identical(report):
    start = time.perf_counter()
    quad = make_synthetic("quadratic", D=6, samples_per_worker=12, N=3, seed=5)
    single = make_synthetic("quadratic", D=6, samples_per_worker=20, N=1, seed=2)
    checks = {
        "one local step": same_path(
            run_genqsgd(quad, AlgorithmParams((7, 1, 1, 1), 4, ConstantStep(0.05)), profile(3), 11,
                        RecordLevel.FULL),
            reference_pm_sgd(quad, 11, 7, 4, 0.05)),
        "unit batch": same_path(
            run_genqsgd(quad, AlgorithmParams((6, 3, 1, 4), 1, ConstantStep(0.05)), profile(3), 12,
                        RecordLevel.FULL),
            reference_pr_sgd(quad, 12, 6, (3, 1, 4), 0.05)),
        "one worker": same_path(
            run_genqsgd(single, AlgorithmParams((9, 4), 3, ConstantStep(0.05)), profile(1), 13,
                        RecordLevel.FULL),
            reference_sgd(single, 13, 9, 4, 3, 0.05)),
    }
    report(10, "unquantized special cases match reference SGD variants", all(checks.values()),
           ", ".join(f"{k}={v}" for k, v in checks.items()), start, 60)


def test_11_bound_holds_on_synthetic_quadratic(report):
    start = time.perf_counter()
    problem = make_synthetic("quadratic", D=20, samples_per_worker=50, N=4, seed=0)
    study = bound_study(problem, count=20, trials=30, seed=0)
    worst = max(r.ratio for r in study.reports)
    report(11, "empirical gradient metric below the bound", study.pass_rate >= 0.95,
           f"{sum(r.passed for r in study.reports)}/20 configs pass, "
           f"{study.strict_pass_rate:.0%} without noise slack, largest metric/bound {worst:.3f}",
           start, 300)


def test_12_tighter_error_limit_trains_further(report, reference_config):
    start = time.perf_counter()
    cfg = reference_config
    sys = cfg.profile()
    images = load_idx(DATA / "mnist2k-images-idx3-ubyte.gz", scale=True)
    labels = load_idx(DATA / "mnist2k-labels-idx1-ubyte.gz")
    rule = cfg.step_rule("constant")
    tuned = {c: optimize(rule, sys, cfg.ml, cfg.with_limits(C_max=c).limits).rounded for c in (0.2, 0.4)}
    finals = {c: [] for c in tuned}
    for seed in range(3):
        problem = make_mnist_mlp(images, labels, sys.N, seed)
        for c, params in tuned.items():
            finals[c].append(run_genqsgd(problem, params, sys, seed, loss_every=0).final_loss)
    med = {c: statistics.median(v) for c, v in finals.items()}
    report(12, "parameters tuned for a tighter error limit reach a lower training loss",
           med[0.2] < med[0.4],
           f"median final loss {med[0.2]:.4f} (K0={int(tuned[0.2].K0)}) vs {med[0.4]:.4f} "
           f"(K0={int(tuned[0.4].K0)})", start, 900)
