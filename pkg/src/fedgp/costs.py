"""Time, energy, and convergence-error models of quantized parallel SGD.

Index 0 of every per-node sequence refers to the server and indices
``1..N`` to the workers. Worker sums use ``math.fsum`` because the system
constants span about thirty orders of magnitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from . import quantizer


# ---------------------------------------------------------------------------
# Step-size rules


@dataclass(frozen=True)
class ConstantStep:
    gamma: float

    def sequence(self, K0: int) -> np.ndarray:
        return np.full(int(K0), self.gamma)

    def max_step(self) -> float:
        return self.gamma


@dataclass(frozen=True)
class ExponentialStep:
    """``gamma * rho ** (k0 - 1)`` for ``k0 = 1..K0``."""

    gamma: float
    rho: float

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"exponential decay rate must lie in (0, 1), got {self.rho}")

    def sequence(self, K0: int) -> np.ndarray:
        return self.gamma * self.rho ** np.arange(int(K0))

    def max_step(self) -> float:
        return self.gamma


@dataclass(frozen=True)
class DiminishingStep:
    """``rho * gamma / (k0 + rho)`` for ``k0 = 1..K0``."""

    gamma: float
    rho: float

    def __post_init__(self):
        if not self.rho > 0.0:
            raise ValueError(f"diminishing-rule offset must be positive, got {self.rho}")

    def sequence(self, K0: int) -> np.ndarray:
        k = np.arange(1, int(K0) + 1, dtype=float)
        return self.rho * self.gamma / (k + self.rho)

    def max_step(self) -> float:
        return self.rho * self.gamma / (1.0 + self.rho)


@dataclass(frozen=True)
class ArbitraryStep:
    """An explicit step-size sequence, one entry per global round."""

    gammas: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        if not self.gammas:
            raise ValueError("step-size sequence is empty")

    def sequence(self, K0: int) -> np.ndarray:
        if int(K0) != len(self.gammas):
            raise ValueError(f"sequence has {len(self.gammas)} entries but K0 = {K0}")
        return np.array(self.gammas)

    def max_step(self) -> float:
        return max(self.gammas)


StepRule = Union[ConstantStep, ExponentialStep, DiminishingStep, ArbitraryStep]


# ---------------------------------------------------------------------------
# Problem data


@dataclass
class SystemProfile:
    """Per-node hardware and link constants (index 0 = server).

    ``s`` holds quantization parameters (``math.inf`` = unquantized).
    ``q_table`` / ``M_table`` override the built-in quantizer's variance
    factor and message size for particular ``s`` values.
    """

    F: np.ndarray
    p: np.ndarray
    r: np.ndarray
    s: tuple
    C: np.ndarray
    alpha: np.ndarray
    dim: int
    q_table: Mapping = field(default_factory=dict)
    M_table: Mapping = field(default_factory=dict)

    def __post_init__(self):
        for name in ("F", "p", "r", "C", "alpha"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 1 or arr.size < 2:
                raise ValueError(f"{name} must list the server and at least one worker")
            if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} entries must be positive and finite")
            setattr(self, name, arr)
        n = self.F.size
        for name in ("p", "r", "C", "alpha"):
            if getattr(self, name).size != n:
                raise ValueError(f"{name} has {getattr(self, name).size} entries, expected {n}")
        self.s = tuple(math.inf if quantizer.is_unquantized(v) else v for v in self.s)
        if len(self.s) != n:
            raise ValueError(f"s has {len(self.s)} entries, expected {n}")
        for v in self.s:
            if not (math.isinf(v) or (v >= 1 and float(v).is_integer())):
                raise ValueError(f"quantization parameters must be positive integers or inf, got {v!r}")
        self.s = tuple(v if math.isinf(v) else int(v) for v in self.s)
        if int(self.dim) < 1:
            raise ValueError("model dimension must be positive")
        self.dim = int(self.dim)

    @property
    def N(self) -> int:
        return self.F.size - 1

    def q(self, s) -> float:
        if s in self.q_table:
            return float(self.q_table[s])
        return quantizer.variance_factor(s, self.dim)

    def M(self, s) -> float:
        if s in self.M_table:
            return float(self.M_table[s])
        return float(quantizer.message_bits(s, self.dim))

    @property
    def q_values(self) -> np.ndarray:
        return np.array([self.q(s) for s in self.s])

    @property
    def M_values(self) -> np.ndarray:
        return np.array([self.M(s) for s in self.s])

    def q_combined(self) -> np.ndarray:
        """``q_{s0,sn}`` for ``n = 1..N``."""
        q = self.q_values
        return np.array([q_combine(q[0], qn) for qn in q[1:]])

    def comm_overhead(self) -> float:
        """Per-round time that does not depend on ``K`` or ``B``."""
        M, r = self.M_values, self.r
        return self.C[0] / self.F[0] + float(np.max(M[1:] / r[1:])) + M[0] / r[0]

    def fixed_energy(self) -> float:
        """Per-round energy that does not depend on ``K`` or ``B``."""
        M = self.M_values
        return self.alpha[0] * self.C[0] * self.F[0] ** 2 + math.fsum(self.p * M / self.r)


@dataclass(frozen=True)
class MLConstants:
    L: float
    sigma: float
    G: float
    f_init: float
    f_star_lb: float = 0.0
    D: int | None = None

    def __post_init__(self):
        for name in ("L", "sigma", "G"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.f_init >= self.f_star_lb:
            raise ValueError("f_init must be at least f_star_lb")


@dataclass(frozen=True)
class Limits:
    T_max: float
    C_max: float

    def __post_init__(self):
        if not (self.T_max > 0 and self.C_max > 0):
            raise ValueError("limits must be positive")


@dataclass(frozen=True)
class AlgorithmParams:
    """``K = (K0, K1..KN)``, batch size ``B``, and a step-size rule."""

    K: tuple[float, ...]
    B: float
    rule: StepRule

    def __post_init__(self):
        K = tuple(float(k) for k in self.K)
        if len(K) < 2 or min(K) <= 0:
            raise ValueError("K needs K0 and at least one positive local iteration count")
        if not self.B > 0:
            raise ValueError("batch size must be positive")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "B", float(self.B))

    @property
    def K0(self) -> float:
        return self.K[0]

    @property
    def local(self) -> np.ndarray:
        return np.array(self.K[1:])

    def is_integral(self) -> bool:
        return all(float(k).is_integer() for k in self.K) and float(self.B).is_integer()


# ---------------------------------------------------------------------------
# Costs


def q_combine(q0: float, qn: float) -> float:
    """Variance factor of a downlink-quantized average of uplink-quantized updates."""
    if q0 < 0 or qn < 0:
        raise ValueError("variance factors must be non-negative")
    return q0 + qn + q0 * qn


def derived_constants(ml: MLConstants, N: int) -> tuple[float, float, float, float]:
    c1 = 2.0 * N * (ml.f_init - ml.f_star_lb)
    c2 = 4.0 * ml.G ** 2 * ml.L ** 2
    c3 = ml.L * ml.sigma ** 2 / N
    c4 = 2.0 * ml.L * ml.G ** 2
    return c1, c2, c3, c4


def _check_sizes(params: AlgorithmParams, sys: SystemProfile):
    if len(params.K) != sys.N + 1:
        raise ValueError(f"K has {len(params.K)} entries but the system has {sys.N} workers")


def time_cost(params: AlgorithmParams, sys: SystemProfile) -> float:
    _check_sizes(params, sys)
    Kn = params.local
    compute = params.B * float(np.max(sys.C[1:] * Kn / sys.F[1:]))
    return params.K0 * (compute + sys.comm_overhead())


def energy_cost(params: AlgorithmParams, sys: SystemProfile) -> float:
    _check_sizes(params, sys)
    Kn = params.local
    worker = math.fsum(sys.alpha[1:] * sys.C[1:] * sys.F[1:] ** 2 * Kn)
    return params.K0 * (params.B * worker + sys.fixed_energy())


def _worker_terms(params: AlgorithmParams, sys: SystemProfile):
    """(sum Kn, max Kn^2, sum q_{s0,sn} Kn^2)."""
    _check_sizes(params, sys)
    Kn = params.local
    return (math.fsum(Kn), float(np.max(Kn)) ** 2, math.fsum(sys.q_combined() * Kn ** 2))


def _check_steps(gammas: np.ndarray, ml: MLConstants):
    if gammas.size == 0:
        raise ValueError("empty step-size sequence")
    if np.any(gammas <= 0) or np.any(gammas > (1.0 / ml.L) * (1 + 1e-12)):
        raise ValueError("every step size must lie in (0, 1/L]")


def conv_error_general(params: AlgorithmParams, sys: SystemProfile, ml: MLConstants,
                       gammas: Sequence[float] | None = None) -> float:
    """Convergence-error bound for an explicit step-size sequence.

    ``gammas`` defaults to the rule's own sequence of length ``K0``.
    """
    g = np.asarray(params.rule.sequence(params.K0) if gammas is None else gammas, dtype=float)
    _check_steps(g, ml)
    c1, c2, c3, c4 = derived_constants(ml, sys.N)
    sK, Kmax2, qK2 = _worker_terms(params, sys)
    s1, s2, s3 = math.fsum(g), math.fsum(g ** 2), math.fsum(g ** 3)
    return (c1 / (sK * s1) + c2 * Kmax2 * s3 / s1
            + c3 * s2 / (params.B * s1) + c4 * qK2 * s2 / (sK * s1))


def conv_error_constant(params: AlgorithmParams, sys: SystemProfile, ml: MLConstants) -> float:
    gamma = _rule_of(params, ConstantStep).gamma
    _check_steps(np.array([gamma]), ml)
    c1, c2, c3, c4 = derived_constants(ml, sys.N)
    sK, Kmax2, qK2 = _worker_terms(params, sys)
    return (c1 / (gamma * params.K0 * sK) + c2 * gamma ** 2 * Kmax2
            + c3 * gamma / params.B + c4 * gamma * qK2 / sK)


def exponential_coefficients(gamma: float, rho: float) -> tuple[float, float, float]:
    a1 = (1.0 - rho) / gamma
    a2 = gamma ** 2 / (1.0 + rho + rho ** 2)
    a3 = gamma / (1.0 + rho)
    return a1, a2, a3


def diminishing_coefficients(gamma: float, rho: float) -> tuple[float, float, float]:
    b1 = 1.0 / (rho * gamma)
    b2 = rho ** 2 * gamma ** 2 / (rho + 1) ** 3 + rho ** 2 * gamma ** 2 / (2 * (rho + 1) ** 2)
    b3 = rho * gamma / (rho + 1) ** 2 + rho * gamma / (rho + 1)
    return b1, b2, b3


def conv_error_exponential(params: AlgorithmParams, sys: SystemProfile, ml: MLConstants) -> float:
    rule = _rule_of(params, ExponentialStep)
    _check_steps(np.array([rule.gamma]), ml)
    a1, a2, a3 = exponential_coefficients(rule.gamma, rule.rho)
    c1, c2, c3, c4 = derived_constants(ml, sys.N)
    sK, Kmax2, qK2 = _worker_terms(params, sys)
    # 1 - rho^(m K0) computed without cancellation for rho near 1
    lr = math.log(rule.rho)
    d1 = -math.expm1(params.K0 * lr)
    d2 = -math.expm1(2 * params.K0 * lr)
    d3 = -math.expm1(3 * params.K0 * lr)
    return (a1 * c1 / (d1 * sK) + a2 * c2 * d3 * Kmax2 / d1
            + a3 * d2 / d1 * (c3 / params.B + c4 * qK2 / sK))


def conv_error_diminishing(params: AlgorithmParams, sys: SystemProfile, ml: MLConstants) -> float:
    rule = _rule_of(params, DiminishingStep)
    _check_steps(np.array([rule.gamma]), ml)
    b1, b2, b3 = diminishing_coefficients(rule.gamma, rule.rho)
    c1, c2, c3, c4 = derived_constants(ml, sys.N)
    sK, Kmax2, qK2 = _worker_terms(params, sys)
    log_term = math.log1p(params.K0 / (rule.rho + 1.0))
    return (b1 * c1 / sK + b2 * c2 * Kmax2 + b3 * c3 / params.B + b3 * c4 * qK2 / sK) / log_term


def conv_error(params: AlgorithmParams, sys: SystemProfile, ml: MLConstants) -> float:
    """Closed-form bound matching the params' step-size rule."""
    rule = params.rule
    if isinstance(rule, ConstantStep):
        return conv_error_constant(params, sys, ml)
    if isinstance(rule, ExponentialStep):
        return conv_error_exponential(params, sys, ml)
    if isinstance(rule, DiminishingStep):
        return conv_error_diminishing(params, sys, ml)
    return conv_error_general(params, sys, ml)


def conv_error_limit(params: AlgorithmParams, sys: SystemProfile, ml: MLConstants) -> float:
    """Value of the closed-form bound as the number of global rounds grows without bound."""
    c1, c2, c3, c4 = derived_constants(ml, sys.N)
    sK, Kmax2, qK2 = _worker_terms(params, sys)
    rule = params.rule
    if isinstance(rule, ConstantStep):
        g = rule.gamma
        return c2 * g ** 2 * Kmax2 + c3 * g / params.B + c4 * g * qK2 / sK
    if isinstance(rule, ExponentialStep):
        a1, a2, a3 = exponential_coefficients(rule.gamma, rule.rho)
        return a1 * c1 / sK + a2 * c2 * Kmax2 + a3 * c3 / params.B + a3 * c4 * qK2 / sK
    if isinstance(rule, DiminishingStep):
        return 0.0
    raise ValueError("limit is defined for the parametric rules only")


def _rule_of(params: AlgorithmParams, kind):
    if not isinstance(params.rule, kind):
        raise TypeError(f"expected a {kind.__name__} rule, got {type(params.rule).__name__}")
    return params.rule
