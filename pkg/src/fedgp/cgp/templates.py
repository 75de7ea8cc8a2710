"""Equivalent smooth problems with auxiliary variables, one per step-size mode.

Variables are ``K0, K1..KN, B, T1, T2`` plus ``X0`` (exponential mode, a
stand-in for ``rho ** K0``), ``gamma`` (full optimization), and ``l``
(FedAvg-style coupling). Every constraint is written as ``g(x) <= 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from ..costs import (AlgorithmParams, ConstantStep, DiminishingStep, ExponentialStep, Limits,
                     MLConstants, SystemProfile, conv_error, derived_constants,
                     diminishing_coefficients, exponential_coefficients, time_cost)
from ..gp import Monomial, Point, Posynomial, eval_posynomial, var
from .condense import condense_posynomial

X0_CEILING = 1.0 - 1e-9
GAMMA_FLOOR = 1e-12


@dataclass(frozen=True)
class FullOptimization:
    """Optimize a constant step size together with ``K`` and ``B``."""


Mode = Union[ConstantStep, ExponentialStep, DiminishingStep, FullOptimization]


def mode_name(mode: Mode) -> str:
    return {ConstantStep: "constant", ExponentialStep: "exponential",
            DiminishingStep: "diminishing", FullOptimization: "full"}[type(mode)]


# ---------------------------------------------------------------------------
# Constraint kinds


class Constraint:
    """``value(x) <= 1`` in the equivalent problem.

    ``surrogate(ref)`` returns a posynomial that upper-bounds
    ``tangent_form(., ref)`` and matches it in value and gradient at ``ref``;
    ``tangent_form(x, ref) <= 1`` iff ``value(x) <= 1``.
    """

    name: str = ""

    def value(self, x: Point) -> float:
        raise NotImplementedError

    def surrogate(self, ref: Point) -> Posynomial:
        raise NotImplementedError

    def tangent_form(self, x: Point, ref: Point) -> float:
        return self.value(x)


@dataclass
class PosyConstraint(Constraint):
    g: Posynomial
    name: str = ""

    def value(self, x):
        return eval_posynomial(self.g, x)

    def surrogate(self, ref):
        return self.g


@dataclass
class FractionConstraint(Constraint):
    """``sum_j num_j(x) / den_j(x) <= 1``; denominators are condensed."""

    parts: list[tuple[Posynomial, Posynomial | None]]
    name: str = ""

    def value(self, x):
        return math.fsum(eval_posynomial(n, x) / (eval_posynomial(d, x) if d is not None else 1.0)
                         for n, d in self.parts)

    def surrogate(self, ref):
        terms = []
        for num, den in self.parts:
            if den is None:
                terms.extend(num.terms)
            else:
                mono = condense_posynomial(den, ref)
                terms.extend((num / mono).terms)
        return Posynomial(terms)


@dataclass
class LogRateConstraint(Constraint):
    """``(ln(1/X0) + 1) / (K0 ln(1/rho) + 1) <= 1``, i.e. ``X0 >= rho ** K0``.

    The numerator, multiplied by ``X0``, is concave in ``X0`` and is replaced
    by its tangent line; the denominator is condensed.
    """

    rho: float
    name: str = "x0_lower"

    def value(self, x):
        lr = -math.log(self.rho)
        return (-math.log(x["X0"]) + 1.0) / (x["K0"] * lr + 1.0)

    def surrogate(self, ref):
        lr = -math.log(self.rho)
        X0r = ref["X0"]
        numer = Posynomial([Monomial(-math.log(X0r), {"X0": 1.0}), Monomial(X0r)])
        den = condense_posynomial(Posynomial([Monomial(lr, {"K0": 1.0}), Monomial(1.0)]), ref)
        return numer / (den * var("X0"))


@dataclass
class DiminishingConstraint(Constraint):
    """``lhs(x) <= C_max ln((K0 + rho + 1) / (rho + 1))``.

    ``lhs`` is a fraction sum free of ``K0``. The convex function
    ``h(K0) = K0 ln((K0 + rho + 1) / (rho + 1))`` is linearised at the
    reference.
    """

    lhs: FractionConstraint
    C_max: float
    rho: float
    name: str = "convergence"

    def _h(self, K0):
        return K0 * math.log1p(K0 / (self.rho + 1.0))

    def _scale(self, ref):
        Kr = ref["K0"]
        return self.C_max * (math.log1p(Kr / (self.rho + 1.0)) + Kr / (Kr + self.rho + 1.0))

    def value(self, x):
        return self.lhs.value(x) / (self.C_max * math.log1p(x["K0"] / (self.rho + 1.0)))

    def tangent_form(self, x, ref):
        K0 = x["K0"]
        return 1.0 + (K0 * self.lhs.value(x) - self.C_max * self._h(K0)) / (K0 * self._scale(ref))

    def surrogate(self, ref):
        Kr = ref["K0"]
        extra = Monomial(self.C_max * Kr ** 2 / (Kr + self.rho + 1.0), {"K0": -1.0})
        return (self.lhs.surrogate(ref) + extra) / self._scale(ref)


# ---------------------------------------------------------------------------
# Template


@dataclass
class Template:
    """An equivalent problem: posynomial energy objective, smooth constraints."""

    mode: Mode
    sys: SystemProfile
    ml: MLConstants
    limits: Limits
    variables: tuple[str, ...]
    objective: Posynomial
    constraints: list[Constraint]
    bounds: list[PosyConstraint]
    equalities: list[Monomial] = field(default_factory=list)
    hints: dict = field(default_factory=dict)
    baseline: str | None = None
    samples: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.sys.N

    @property
    def all_constraints(self) -> list[Constraint]:
        return list(self.constraints) + list(self.bounds)

    def energy(self, x: Point) -> float:
        return eval_posynomial(self.objective, x)

    def violation(self, x: Point) -> float:
        """Largest ``g(x) - 1`` over inequalities and ``|m(x) - 1|`` over equalities."""
        worst = -math.inf
        for c in self.all_constraints:
            worst = max(worst, c.value(x) - 1.0)
        for m in self.equalities:
            worst = max(worst, abs(m(x) - 1.0))
        return worst

    def is_feasible(self, x: Point, tol: float = 1e-9) -> bool:
        return self.violation(x) <= tol

    def tighten(self, x: Point) -> dict:
        """Set ``T1``, ``T2`` (and ``X0``) to the smallest values the constraints allow."""
        x = dict(x)
        Kn = np.array([x[f"K{n}"] for n in range(1, self.N + 1)])
        x["T1"] = float(np.max(self.sys.C[1:] / self.sys.F[1:] * Kn))
        x["T2"] = float(np.max(Kn))
        if isinstance(self.mode, ExponentialStep):
            x["X0"] = min(self.mode.rho ** x["K0"], X0_CEILING)
        return x

    def rule(self, x: Point):
        if isinstance(self.mode, FullOptimization):
            return ConstantStep(float(x["gamma"]))
        return self.mode

    def params(self, x: Point) -> AlgorithmParams:
        K = tuple(float(x[f"K{n}"]) for n in range(self.N + 1))
        return AlgorithmParams(K, float(x["B"]), self.rule(x))

    def original_violation(self, params: AlgorithmParams) -> float:
        """Relative excess over the time and convergence limits (true max terms)."""
        t = time_cost(params, self.sys) / self.limits.T_max - 1.0
        c = conv_error(params, self.sys, self.ml) / self.limits.C_max - 1.0
        return max(t, c)


def _ksum(N: int) -> Posynomial:
    return Posynomial([var(f"K{n}") for n in range(1, N + 1)])


def _qk2(sys: SystemProfile, scale: float) -> Posynomial | None:
    q = sys.q_combined()
    terms = [Monomial(scale * qn, {f"K{n}": 2.0}) for n, qn in enumerate(q, start=1) if qn > 0]
    return Posynomial(terms) if terms else None


def energy_posynomial(sys: SystemProfile) -> Posynomial:
    w = sys.alpha[1:] * sys.C[1:] * sys.F[1:] ** 2
    terms = [Monomial(float(wn), {"K0": 1.0, "B": 1.0, f"K{n}": 1.0}) for n, wn in enumerate(w, start=1)]
    terms.append(Monomial(sys.fixed_energy(), {"K0": 1.0}))
    return Posynomial(terms)


def build_equivalent(mode: Mode, sys: SystemProfile, ml: MLConstants, limits: Limits,
                     baseline: str | None = None,
                     samples_per_worker: Sequence[float] | float | None = None) -> Template:
    """Equivalent smooth problem for ``mode``; ``baseline`` adds structural equalities.

    ``baseline`` is one of ``None``, ``"pm"`` (every ``Kn = 1``), ``"pr"``
    (``B = 1``), or ``"fa"`` (``Kn = l * In / B`` with ``l >= 1``, which needs
    ``samples_per_worker``).
    """
    N = sys.N
    Cmax, Tmax = limits.C_max, limits.T_max
    c1, c2, c3, c4 = derived_constants(ml, N)
    K0, B, T2 = var("K0"), var("B"), var("T2")
    ksum = _ksum(N)

    names = ["K0"] + [f"K{n}" for n in range(1, N + 1)] + ["B", "T1", "T2"]
    cons: list[Constraint] = []
    for n in range(1, N + 1):
        cons.append(PosyConstraint(Posynomial([Monomial(sys.C[n] / sys.F[n], {f"K{n}": 1.0, "T1": -1.0})]),
                                   f"compute_time_{n}"))
    for n in range(1, N + 1):
        cons.append(PosyConstraint(Posynomial([Monomial(1.0, {f"K{n}": 1.0, "T2": -1.0})]),
                                   f"local_max_{n}"))
    kappa = sys.comm_overhead()
    cons.append(PosyConstraint(Posynomial([Monomial(kappa / Tmax, {"K0": 1.0}),
                                           Monomial(1.0 / Tmax, {"K0": 1.0, "B": 1.0, "T1": 1.0})]),
                               "time"))
    bounds = [PosyConstraint(Posynomial([Monomial(1.0, {k: -1.0})]), f"{k}_at_least_1")
              for k in names[:N + 2]]
    hints = {"K0": (1.0, 1e6), "B": (1.0, 1e4), "T1": (1e-6, 1e3), "T2": (1.0, 1e3)}
    for n in range(1, N + 1):
        hints[f"K{n}"] = (1.0, 1e3)

    if isinstance(mode, (ConstantStep, FullOptimization)):
        if isinstance(mode, ConstantStep):
            g = Monomial(mode.gamma)
        else:
            g = var("gamma")
            names.append("gamma")
            hints["gamma"] = (1e-4, 1.0 / ml.L)
            bounds.append(PosyConstraint(Posynomial([Monomial(ml.L, {"gamma": 1.0})]), "gamma_at_most_1_over_L"))
            bounds.append(PosyConstraint(Posynomial([Monomial(GAMMA_FLOOR, {"gamma": -1.0})]), "gamma_positive"))
        parts = [(Posynomial([Monomial(c1 / Cmax) / (g * K0)]), ksum),
                 (Posynomial([Monomial(c2 / Cmax) * g ** 2 * T2 ** 2]), None),
                 (Posynomial([Monomial(c3 / Cmax) * g / B]), None)]
        qk = _qk2(sys, c4 / Cmax)
        if qk is not None:
            parts.append((qk * g, ksum))
        cons.append(FractionConstraint(parts, "convergence"))
    elif isinstance(mode, ExponentialStep):
        a1, a2, a3 = exponential_coefficients(mode.gamma, mode.rho)
        X0 = var("X0")
        names.append("X0")
        hints["X0"] = (1e-20, X0_CEILING)
        numer = Posynomial([Monomial(a1 * c1)]) + (
            Posynomial([Monomial(a2 * c2) * T2 ** 2, Monomial(a3 * c3) / B, Monomial(Cmax) * X0]) * ksum)
        denom = (Posynomial([Monomial(Cmax), Monomial(a2 * c2) * T2 ** 2 * X0 ** 3,
                             Monomial(a3 * c3) * X0 ** 2 / B]) * ksum)
        qk = _qk2(sys, a3 * c4)
        if qk is not None:
            numer = numer + qk
            denom = denom + qk * X0 ** 2
        cons.append(FractionConstraint([(numer, denom)], "convergence"))
        cons.append(LogRateConstraint(mode.rho))
        bounds.append(PosyConstraint(Posynomial([Monomial(1.0 / X0_CEILING, {"X0": 1.0})]), "X0_below_1"))
    elif isinstance(mode, DiminishingStep):
        b1, b2, b3 = diminishing_coefficients(mode.gamma, mode.rho)
        parts = [(Posynomial([Monomial(b1 * c1)]), ksum),
                 (Posynomial([Monomial(b2 * c2) * T2 ** 2]), None),
                 (Posynomial([Monomial(b3 * c3) / B]), None)]
        qk = _qk2(sys, b3 * c4)
        if qk is not None:
            parts.append((qk, ksum))
        cons.append(DiminishingConstraint(FractionConstraint(parts), Cmax, mode.rho))
    else:
        raise TypeError(f"unknown mode {mode!r}")

    equalities: list[Monomial] = []
    samples = None
    if baseline in (None, "none"):
        baseline = None
    elif baseline == "pm":
        equalities = [var(f"K{n}") for n in range(1, N + 1)]
    elif baseline == "pr":
        equalities = [B]
    elif baseline == "fa":
        if samples_per_worker is None:
            raise ValueError("the FedAvg baseline needs samples_per_worker")
        samples = np.broadcast_to(np.asarray(samples_per_worker, dtype=float), (N,)).copy()
        names.append("l")
        hints["l"] = (1.0, 1e3)
        bounds.append(PosyConstraint(Posynomial([Monomial(1.0, {"l": -1.0})]), "l_at_least_1"))
        equalities = [Monomial(1.0 / samples[n - 1], {f"K{n}": 1.0, "B": 1.0, "l": -1.0})
                      for n in range(1, N + 1)]
    else:
        raise ValueError(f"unknown baseline {baseline!r}")
    # a variable pinned to 1 leaves its ">= 1" bound with no interior
    pinned = {next(iter(m.exponents)) for m in equalities if len(m.exponents) == 1 and m.coeff == 1.0}
    bounds = [b for b in bounds if b.name not in {f"{k}_at_least_1" for k in pinned}]

    return Template(mode=mode, sys=sys, ml=ml, limits=limits, variables=tuple(names),
                    objective=energy_posynomial(sys), constraints=cons, bounds=bounds,
                    equalities=equalities, hints=hints, baseline=baseline, samples=samples)
