"""Posynomial algebra and a geometric-program solver.

A geometric program (GP) is solved in its log-transformed convex form: with
``y = log x`` every posynomial becomes a log-sum-exp of affine functions and
every monomial becomes affine. The convex problem is solved by a logarithmic
barrier method (damped Newton with backtracking) after an optional phase-I
search for a strictly feasible point. Monomial equalities are removed by
parametrising their affine solution set.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import nnls

Point = Mapping[str, float]

# Log-space box that keeps phase I and unbounded directions compact.
LOG_GUARD = 120.0
DEFAULT_BRACKET = (1e-6, 1e12)


class GPError(ValueError):
    """Malformed GP input (undeclared variable, non-positive data, ...)."""


# ---------------------------------------------------------------------------
# Algebra


@dataclass(frozen=True)
class Monomial:
    """``coeff * prod(x_i ** a_i)`` with ``coeff > 0``."""

    coeff: float
    exponents: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        c = float(self.coeff)
        if not (c > 0.0) or not math.isfinite(c):
            raise GPError(f"monomial coefficient must be positive and finite, got {self.coeff!r}")
        exps = {}
        for k, v in self.exponents.items():
            v = float(v)
            if not math.isfinite(v):
                raise GPError(f"exponent of {k!r} is not finite")
            if v != 0.0:
                exps[k] = v
        object.__setattr__(self, "coeff", c)
        object.__setattr__(self, "exponents", dict(sorted(exps.items())))

    @property
    def variables(self) -> set[str]:
        return set(self.exponents)

    def __call__(self, x: Point) -> float:
        return eval_monomial(self, x)

    def __mul__(self, other):
        if isinstance(other, Monomial):
            exps = dict(self.exponents)
            for k, v in other.exponents.items():
                exps[k] = exps.get(k, 0.0) + v
            return Monomial(self.coeff * other.coeff, exps)
        if isinstance(other, Posynomial):
            return other * self
        if isinstance(other, (int, float)):
            return Monomial(self.coeff * other, self.exponents)
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Monomial):
            return self * other ** -1
        if isinstance(other, (int, float)):
            return Monomial(self.coeff / other, self.exponents)
        return NotImplemented

    def __rtruediv__(self, other):
        if isinstance(other, (int, float)):
            return Monomial(other, {}) * self ** -1
        return NotImplemented

    def __pow__(self, p: float):
        return Monomial(self.coeff ** p, {k: v * p for k, v in self.exponents.items()})

    def __add__(self, other):
        return Posynomial([self]) + other

    __radd__ = __add__

    def __repr__(self):
        body = " * ".join(f"{k}^{v:g}" for k, v in self.exponents.items())
        return f"{self.coeff:.6g}" + (f" * {body}" if body else "")


@dataclass(frozen=True)
class Posynomial:
    """A non-empty sum of monomials."""

    terms: tuple[Monomial, ...]

    def __init__(self, terms: Sequence[Monomial]):
        terms = tuple(terms)
        if not terms:
            raise GPError("posynomial needs at least one term")
        for t in terms:
            if not isinstance(t, Monomial):
                raise GPError(f"posynomial term must be a Monomial, got {type(t).__name__}")
        object.__setattr__(self, "terms", terms)

    @property
    def variables(self) -> set[str]:
        out: set[str] = set()
        for t in self.terms:
            out |= t.variables
        return out

    def __call__(self, x: Point) -> float:
        return eval_posynomial(self, x)

    def __add__(self, other):
        if isinstance(other, Monomial):
            return Posynomial(self.terms + (other,))
        if isinstance(other, Posynomial):
            return Posynomial(self.terms + other.terms)
        if isinstance(other, (int, float)):
            return Posynomial(self.terms + (Monomial(other),))
        return NotImplemented

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (Monomial, int, float)):
            return Posynomial([t * other for t in self.terms])
        if isinstance(other, Posynomial):
            return Posynomial([a * b for a in self.terms for b in other.terms])
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (Monomial, int, float)):
            return Posynomial([t / other for t in self.terms])
        return NotImplemented

    def __repr__(self):
        return " + ".join(repr(t) for t in self.terms)


def var(name: str) -> Monomial:
    return Monomial(1.0, {name: 1.0})


def as_posynomial(g) -> Posynomial:
    if isinstance(g, Posynomial):
        return g
    if isinstance(g, Monomial):
        return Posynomial([g])
    raise GPError(f"expected a Monomial or Posynomial, got {type(g).__name__}")


def eval_monomial(m: Monomial, x: Point) -> float:
    """Value of ``m`` at the positive point ``x``."""
    val = m.coeff
    for k, a in m.exponents.items():
        if k not in x:
            raise KeyError(f"variable {k!r} missing from point")
        xi = float(x[k])
        if not xi > 0.0:
            raise GPError(f"variable {k!r} must be positive, got {xi!r}")
        val *= xi ** a
    return val


def eval_posynomial(g: Posynomial, x: Point) -> float:
    return math.fsum(eval_monomial(t, x) for t in as_posynomial(g).terms)


# ---------------------------------------------------------------------------
# Problem description


@dataclass(frozen=True)
class GeoProgram:
    """``min objective  s.t.  ineq_i <= 1,  eq_j == 1,  x_k <= upper_k``.

    ``hints`` gives per-variable brackets ``(lo, hi)`` whose log-midpoint is
    the solver's starting point; variables without hints use
    ``DEFAULT_BRACKET``.
    """

    variables: tuple[str, ...]
    objective: Posynomial
    ineq_constraints: tuple[Posynomial, ...] = ()
    mono_eq_constraints: tuple[Monomial, ...] = ()
    upper_bounds: Mapping[str, float] = field(default_factory=dict)
    hints: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    constraint_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "objective", as_posynomial(self.objective))
        object.__setattr__(self, "ineq_constraints",
                           tuple(as_posynomial(g) for g in self.ineq_constraints))
        object.__setattr__(self, "mono_eq_constraints", tuple(self.mono_eq_constraints))
        if len(set(self.variables)) != len(self.variables):
            raise GPError("duplicate variable names")
        declared = set(self.variables)
        used = set(self.objective.variables)
        for g in self.ineq_constraints:
            used |= g.variables
        for m in self.mono_eq_constraints:
            if not isinstance(m, Monomial):
                raise GPError("equality constraints must be monomials")
            used |= m.variables
        undeclared = used - declared
        if undeclared:
            raise GPError(f"undeclared variables: {sorted(undeclared)}")
        for k, ub in self.upper_bounds.items():
            if k not in declared:
                raise GPError(f"upper bound on undeclared variable {k!r}")
            if not ub > 0:
                raise GPError(f"upper bound on {k!r} must be positive")
        names = tuple(self.constraint_names)
        if names and len(names) != len(self.ineq_constraints):
            raise GPError("constraint_names must match ineq_constraints")
        if not names:
            names = tuple(f"c{i}" for i in range(len(self.ineq_constraints)))
        object.__setattr__(self, "constraint_names", names)

    def all_inequalities(self) -> list[Posynomial]:
        """Inequalities with upper bounds appended as ``x/ub <= 1``."""
        out = list(self.ineq_constraints)
        for k, ub in self.upper_bounds.items():
            out.append(Posynomial([Monomial(1.0 / ub, {k: 1.0})]))
        return out


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITERATIONS = "MaxIterations"
    UNBOUNDED = "Unbounded"


@dataclass
class SolverOptions:
    kkt_tol: float = 1e-8
    feas_tol: float = 1e-9
    gap_tol: float = 1e-8
    mu: float = 20.0
    max_newton: int = 100
    max_outer: int = 60
    infeas_tol: float = 1e-7
    phase1_margin: float = 1e-3


@dataclass
class GpSolution:
    point: dict[str, float]
    objective_value: float
    status: Status
    kkt_residual: float
    multipliers: tuple[float, ...] = ()
    outer_log: tuple[float, ...] = ()
    newton_steps: int = 0
    phase1_value: float = float("nan")


# ---------------------------------------------------------------------------
# Convex form


@dataclass(frozen=True)
class _LSE:
    """Stack of log-sum-exp functions ``log sum_k exp(A_k y + b_k)`` per group."""

    A: np.ndarray
    b: np.ndarray
    starts: np.ndarray  # first row of each group

    @property
    def count(self) -> int:
        return len(self.starts)

    @classmethod
    def from_posynomials(cls, posys: Sequence[Posynomial], index: Mapping[str, int], n: int) -> "_LSE":
        rows, b, starts = [], [], []
        for g in posys:
            starts.append(len(rows))
            for t in g.terms:
                r = np.zeros(n)
                for k, a in t.exponents.items():
                    r[index[k]] = a
                rows.append(r)
                b.append(math.log(t.coeff))
        A = np.array(rows, dtype=float).reshape(len(rows), n)
        return cls(A, np.array(b, dtype=float), np.array(starts, dtype=int))

    def affine_map(self, Z: np.ndarray, y0: np.ndarray) -> "_LSE":
        return _LSE(self.A @ Z, self.b + self.A @ y0, self.starts)

    def values(self, y: np.ndarray) -> np.ndarray:
        if self.count == 0:
            return np.zeros(0)
        z = self.A @ y + self.b
        zmax = np.maximum.reduceat(z, self.starts)
        lens = np.diff(np.append(self.starts, len(z)))
        e = np.exp(z - np.repeat(zmax, lens))
        return zmax + np.log(np.add.reduceat(e, self.starts))

    def derivatives(self, y: np.ndarray):
        """Values, per-group gradients (rows), and per-term softmax weights."""
        z = self.A @ y + self.b
        zmax = np.maximum.reduceat(z, self.starts)
        lens = np.diff(np.append(self.starts, len(z)))
        e = np.exp(z - np.repeat(zmax, lens))
        s = np.add.reduceat(e, self.starts)
        vals = zmax + np.log(s)
        w = e / np.repeat(s, lens)
        grads = np.add.reduceat(w[:, None] * self.A, self.starts, axis=0)
        return vals, grads, w, lens


@dataclass(frozen=True)
class ConvexForm:
    """Log-space descriptor of a GP.

    ``objective(y)`` and ``constraints(y)`` return log-sum-exp values; for
    every ``x > 0``, ``posy(x) == exp(lse(log x))``. Equalities read
    ``eq_C @ y + eq_d == 0``.
    """

    variables: tuple[str, ...]
    obj: _LSE
    ineq: _LSE
    eq_C: np.ndarray
    eq_d: np.ndarray

    def objective(self, y) -> float:
        return float(self.obj.values(np.asarray(y, dtype=float))[0])

    def constraints(self, y) -> np.ndarray:
        return self.ineq.values(np.asarray(y, dtype=float))

    def equalities(self, y) -> np.ndarray:
        return self.eq_C @ np.asarray(y, dtype=float) + self.eq_d

    def to_log(self, x: Point) -> np.ndarray:
        return np.array([math.log(x[v]) for v in self.variables])


def to_convex_form(gp: GeoProgram) -> ConvexForm:
    index = {v: i for i, v in enumerate(gp.variables)}
    n = len(gp.variables)
    obj = _LSE.from_posynomials([gp.objective], index, n)
    ineq = _LSE.from_posynomials(gp.all_inequalities(), index, n)
    C = np.zeros((len(gp.mono_eq_constraints), n))
    d = np.zeros(len(gp.mono_eq_constraints))
    for j, m in enumerate(gp.mono_eq_constraints):
        for k, a in m.exponents.items():
            C[j, index[k]] = a
        d[j] = math.log(m.coeff)
    return ConvexForm(tuple(gp.variables), obj, ineq, C, d)


def check_feasible(gp: GeoProgram, x: Point, tol: float = 1e-9) -> tuple[bool, float]:
    """Whether ``x`` satisfies every constraint within ``tol``; also the worst violation."""
    worst = 0.0
    for g in gp.all_inequalities():
        worst = max(worst, eval_posynomial(g, x) - 1.0)
    for m in gp.mono_eq_constraints:
        worst = max(worst, abs(eval_monomial(m, x) - 1.0))
    return worst <= tol, worst


# ---------------------------------------------------------------------------
# Barrier solver


DECREMENT_TOL = 1e-12


class _Barrier:
    """Barrier machinery over a reduced variable ``z`` (equalities eliminated).

    Minimises ``t * f0(z) - sum log(-f_i(z))`` where ``f0`` is either a
    log-sum-exp or, in phase I, the last coordinate of ``z``.
    """

    def __init__(self, obj: _LSE | None, cons: _LSE, guards: tuple[np.ndarray, np.ndarray]):
        self.obj = obj
        self.cons = cons
        self.GA, self.Gb = guards  # affine guards GA z + Gb <= 0

    def f0(self, z):
        if self.obj is None:
            return z[-1]
        return self.obj.values(z)[0]

    def cons_values(self, z):
        return np.concatenate([self.cons.values(z), self.GA @ z + self.Gb])

    def grad_hess(self, z, t):
        n = len(z)
        if self.obj is None:
            g0 = np.zeros(n)
            g0[-1] = 1.0
            H0 = np.zeros((n, n))
        else:
            _, G, w, _ = self.obj.derivatives(z)
            g0 = G[0]
            H0 = (self.obj.A * w[:, None]).T @ self.obj.A - np.outer(g0, g0)
        grad = t * g0
        hess = t * H0
        if self.cons.count:
            f, G, w, lens = self.cons.derivatives(z)
            inv = -1.0 / f  # positive
            grad = grad + G.T @ inv
            scale = np.repeat(inv, lens) * w
            hess = hess + (self.cons.A * scale[:, None]).T @ self.cons.A
            hess = hess + (G * (inv ** 2 - inv)[:, None]).T @ G
        if len(self.Gb):
            fg = self.GA @ z + self.Gb
            inv = -1.0 / fg
            grad = grad + self.GA.T @ inv
            hess = hess + (self.GA * (inv ** 2)[:, None]).T @ self.GA
        return grad, hess

    def phi(self, z, t):
        f = self.cons_values(z)
        if np.any(f >= 0) or not np.all(np.isfinite(f)):
            return np.inf
        return t * self.f0(z) - np.sum(np.log(-f))

    def center(self, z, t, opts: SolverOptions, grad_tol: float):
        """Newton centering; returns (z, steps, converged).

        Stops on a small scaled gradient or a Newton decrement below
        ``DECREMENT_TOL`` (barrier suboptimality at roundoff level).
        """
        steps = 0
        phi0 = self.phi(z, t)
        for _ in range(opts.max_newton):
            g, H = self.grad_hess(z, t)
            gnorm = float(np.max(np.abs(g))) / t
            if gnorm <= grad_tol:
                return z, steps, True
            dz = _solve_psd(H, -g)
            dec2 = float(-g @ dz)
            if dec2 < DECREMENT_TOL:
                return z, steps, True
            if dec2 < 1e-2:
                # quadratic region: full step, Armijo cannot resolve the decrease
                zn = z + dz
                ph = self.phi(zn, t)
                if np.isfinite(ph):
                    if ph > phi0 + 1e-13 * abs(phi0):
                        # roundoff floor of the barrier value
                        return z, steps, True
                    z, phi0 = zn, ph
                    steps += 1
                    continue
            s = 1.0
            while True:
                zn = z + s * dz
                ph = self.phi(zn, t)
                if ph <= phi0 - 0.25 * s * dec2:
                    break
                s *= 0.5
                if s < 1e-14:
                    return z, steps, gnorm <= 1e3 * grad_tol
            z, phi0 = zn, ph
            steps += 1
        return z, steps, False


def _solve_psd(H, rhs):
    n = H.shape[0]
    ridge = 0.0
    scale = max(1.0, float(np.max(np.abs(np.diag(H))))) if n else 1.0
    for _ in range(8):
        try:
            L = np.linalg.cholesky(H + ridge * np.eye(n))
            return np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        except np.linalg.LinAlgError:
            ridge = scale * 1e-14 if ridge == 0.0 else ridge * 100.0
    return np.linalg.lstsq(H, rhs, rcond=None)[0]


def _eliminate_equalities(C, d, n):
    """Return (y0, Z) with {y : C y + d = 0} = {y0 + Z z}; None if inconsistent."""
    if C.shape[0] == 0:
        return np.zeros(n), np.eye(n)
    U, S, Vt = np.linalg.svd(C)
    rank = int(np.sum(S > 1e-12 * max(1.0, S[0])))
    y0 = -np.linalg.pinv(C) @ d
    if np.max(np.abs(C @ y0 + d)) > 1e-9:
        return None
    return y0, Vt[rank:].T


def solve_gp(gp: GeoProgram, opts: SolverOptions | None = None,
             start: Point | None = None) -> GpSolution:
    """Solve ``gp`` to a point whose convex-form KKT residual is below ``opts.kkt_tol``.

    ``start`` is an optional positive point used in place of the bracket
    midpoints; it need not be feasible.
    """
    opts = opts or SolverOptions()
    if not gp.variables:
        raise GPError("GP has no variables")
    cf = to_convex_form(gp)
    n = len(gp.variables)
    elim = _eliminate_equalities(cf.eq_C, cf.eq_d, n)
    if elim is None:
        return _infeasible(gp, np.zeros(n), float("inf"))
    y0, Z = elim
    r = Z.shape[1]

    if start is not None:
        ystart = cf.to_log(start)
    else:
        ystart = np.array([0.5 * sum(math.log(v) for v in gp.hints.get(name, DEFAULT_BRACKET))
                           for name in gp.variables])
    z = Z.T @ (ystart - y0)

    obj = cf.obj.affine_map(Z, y0)
    cons = cf.ineq.affine_map(Z, y0)
    # guards: -GUARD <= y0 + Z z <= GUARD
    GA = np.vstack([Z, -Z]) if r else np.zeros((0, 0))
    Gb = np.concatenate([y0 - LOG_GUARD, -y0 - LOG_GUARD]) if r else np.zeros(0)

    if r == 0:
        y = y0
        fv = cons.values(np.zeros(0)) if cons.count else np.zeros(0)
        if fv.size and np.max(fv) > math.log1p(opts.feas_tol):
            return _infeasible(gp, y, float(np.max(fv)))
        return _finish(gp, cf, y, Status.OPTIMAL, 0.0, np.zeros(cons.count), (), 0, float("nan"))

    if np.any(np.abs(y0 + Z @ z) >= LOG_GUARD):
        z = np.clip(y0 + Z @ z, -LOG_GUARD / 2, LOG_GUARD / 2)
        z = Z.T @ (z - y0)

    steps_total = 0
    phase1_value = float("nan")
    fvals = cons.values(z) if cons.count else np.zeros(0)
    if fvals.size and np.max(fvals) >= -opts.phase1_margin:
        z, phase1_value, ok, steps = _phase_one(cons, (GA, Gb), z, opts)
        steps_total += steps
        if not ok:
            return _infeasible(gp, y0 + Z @ z, phase1_value)

    bar = _Barrier(obj, cons, (GA, Gb))
    m = cons.count + len(Gb)
    t = 1.0
    log: list[float] = []
    status = Status.MAX_ITERATIONS
    for _ in range(opts.max_outer):
        z, steps, _ = bar.center(z, t, opts, opts.kkt_tol / 10)
        steps_total += steps
        log.append(float(bar.f0(z)))
        if m / t < opts.gap_tol:
            # _finish re-checks KKT and feasibility before keeping OPTIMAL
            status = Status.OPTIMAL
            break
        t *= opts.mu
    y = y0 + Z @ z
    lam = -1.0 / (t * cons.values(z)) if cons.count else np.zeros(0)
    if np.min(LOG_GUARD - np.abs(y)) < 1.0:
        status = Status.UNBOUNDED
    return _finish(gp, cf, y, status, t, lam, tuple(log), steps_total, phase1_value,
                   opts.kkt_tol, opts.feas_tol)


def _phase_one(cons: _LSE, guards, z, opts: SolverOptions):
    """Minimise s subject to f_i(z) <= s, s >= -1. Returns (z, s*, feasible, steps)."""
    r = len(z)
    A1 = np.hstack([cons.A, -np.ones((cons.A.shape[0], 1))])
    rel = _LSE(A1, cons.b, cons.starts)
    GA, Gb = guards
    GA1 = np.vstack([np.hstack([GA, np.zeros((GA.shape[0], 1))]),
                     np.eye(1, r + 1, r) * -1.0])
    Gb1 = np.concatenate([Gb, [-1.0]])
    s0 = max(float(np.max(cons.values(z))) + 1.0, 0.0)
    w = np.append(z, s0)
    bar = _Barrier(None, rel, (GA1, Gb1))
    m = rel.count + len(Gb1)
    t = 1.0
    steps_total = 0
    infeas_level = math.log1p(opts.infeas_tol)
    for _ in range(opts.max_outer):
        w, steps, converged = bar.center(w, t, opts, 1e-12)
        steps_total += steps
        zc = w[:-1]
        worst = float(np.max(cons.values(zc)))
        if worst <= -opts.phase1_margin:
            return zc, worst, True, steps_total
        lower = w[-1] - m / t
        if lower > infeas_level:
            return zc, worst, False, steps_total
        if m / t < 1e-11 and converged:
            return zc, worst, worst < 0.0, steps_total
        t *= opts.mu
    worst = float(np.max(cons.values(w[:-1])))
    return w[:-1], worst, worst < 0.0, steps_total


def _infeasible(gp: GeoProgram, y, phase1_value) -> GpSolution:
    point = {v: float(math.exp(yi)) for v, yi in zip(gp.variables, y)}
    return GpSolution(point, float("nan"), Status.INFEASIBLE, float("inf"),
                      phase1_value=float(phase1_value))


def _finish(gp, cf: ConvexForm, y, status, t, lam, log, steps, phase1_value,
            kkt_tol=1e-8, feas_tol=1e-9):
    # guard multipliers are O(1/(t * LOG_GUARD)) and left out of the residual
    kkt = kkt_residual(cf, y, lam)
    if status is not Status.UNBOUNDED and lam.size:
        lam_ref = _refine_multipliers(cf, y)
        kkt_ref = kkt_residual(cf, y, lam_ref)
        if kkt_ref < kkt:
            lam, kkt = lam_ref, kkt_ref
        if kkt > 0.1 * kkt_tol:
            y, lam, kkt = _polish(cf, y, lam, kkt, feas_tol)
    point = {v: float(math.exp(yi)) for v, yi in zip(gp.variables, y)}
    if status is Status.OPTIMAL:
        ok, _ = check_feasible(gp, point, feas_tol)
        if not ok or kkt > kkt_tol:
            status = Status.MAX_ITERATIONS
    obj = eval_posynomial(gp.objective, point)
    n_user = len(gp.ineq_constraints)
    return GpSolution(point, obj, status, kkt, tuple(float(v) for v in lam[:n_user]),
                      tuple(log), steps, phase1_value)


def _lse_hessians(lse: _LSE, y, weights):
    """Sum over groups of ``weights[j]`` times the Hessian of group ``j``."""
    _, G, w, lens = lse.derivatives(y)
    scale = np.repeat(weights, lens) * w
    return (lse.A * scale[:, None]).T @ lse.A - (G * weights[:, None]).T @ G


def _polish(cf: ConvexForm, y, lam, kkt, feas_tol, active_tol=1e-6, iters=6):
    """Newton steps on the active-set KKT system; keeps the best residual found."""
    f = cf.constraints(y)
    act = np.flatnonzero(f >= -active_tol)
    if act.size == 0:
        return y, lam, kkt
    n, p, q = len(y), act.size, cf.eq_C.shape[0]
    log_tol = math.log1p(feas_tol)
    best = (y, lam, kkt)
    yk, mu = y.copy(), lam[act].copy()
    nu = np.zeros(q)
    for _ in range(iters):
        _, G0, _, _ = cf.obj.derivatives(yk)
        fk, Gk, _, _ = cf.ineq.derivatives(yk)
        J = Gk[act]
        wts = np.zeros(cf.ineq.count)
        wts[act] = mu
        H = _lse_hessians(cf.obj, yk, np.ones(1)) + _lse_hessians(cf.ineq, yk, wts)
        K = np.zeros((n + p + q, n + p + q))
        K[:n, :n] = H
        K[:n, n:n + p] = J.T
        K[n:n + p, :n] = J
        K[:n, n + p:] = cf.eq_C.T
        K[n + p:, :n] = cf.eq_C
        rhs = -np.concatenate([G0[0] + J.T @ mu + cf.eq_C.T @ nu, fk[act], cf.equalities(yk)])
        step = np.linalg.lstsq(K, rhs, rcond=None)[0]
        yk = yk + step[:n]
        mu = mu + step[n:n + p]
        nu = nu + step[n + p:]
        if np.any(mu < 0) or not np.all(np.isfinite(yk)):
            break
        lam_k = np.zeros(cf.ineq.count)
        lam_k[act] = mu
        if np.max(cf.constraints(yk)) > log_tol:
            continue
        r = kkt_residual(cf, yk, lam_k)
        if r < best[2]:
            best = (yk.copy(), lam_k, r)
    return best


def _refine_multipliers(cf: ConvexForm, y: np.ndarray, active_tol: float = 1e-6) -> np.ndarray:
    """Nonnegative multipliers on the near-active set minimising stationarity error."""
    _, G0, _, _ = cf.obj.derivatives(y)
    f, G, _, _ = cf.ineq.derivatives(y)
    act = np.flatnonzero(f >= -active_tol)
    lam = np.zeros(cf.ineq.count)
    if act.size == 0:
        return lam
    M = G[act].T
    rhs = -G0[0]
    if cf.eq_C.shape[0]:
        # project onto the complement of the equality normals
        Q, _ = np.linalg.qr(cf.eq_C.T)
        P = np.eye(len(y)) - Q @ Q.T
        M, rhs = P @ M, P @ rhs
    lam[act] = nnls(M, rhs)[0]
    return lam


def kkt_residual(cf: ConvexForm, y: np.ndarray, lam: np.ndarray) -> float:
    """KKT residual of the convex form at ``y`` with inequality multipliers ``lam``.

    Maximum of: stationarity (gradient of the Lagrangian projected off the
    equality normals), complementary slackness, and primal violation.
    """
    y = np.asarray(y, dtype=float)
    _, G0, _, _ = cf.obj.derivatives(y)
    r = G0[0].copy()
    comp = 0.0
    viol = 0.0
    if cf.ineq.count:
        f, G, _, _ = cf.ineq.derivatives(y)
        r = r + G.T @ lam
        comp = float(np.max(np.abs(lam * f)))
        viol = max(0.0, float(np.max(f)))
    if cf.eq_C.shape[0]:
        nu = np.linalg.lstsq(cf.eq_C.T, -r, rcond=None)[0]
        r = r + cf.eq_C.T @ nu
        viol = max(viol, float(np.max(np.abs(cf.equalities(y)))))
    stat = float(np.max(np.abs(r))) if r.size else 0.0
    return max(stat, comp, viol)
