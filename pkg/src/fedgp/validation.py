"""Monte-Carlo checks of the convergence bound on synthetic problems."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .costs import (AlgorithmParams, ConstantStep, DiminishingStep, ExponentialStep, MLConstants,
                    SystemProfile)
from .problems import LogisticProblem, MLProblem, QuadraticProblem
from .sim import BoundReport, validate_bound

LEVEL_CHOICES = (math.inf, 64, 16, 4)


def region_constants(problem: MLProblem, fallback: MLConstants | None = None):
    """Constants that provably hold where the runs went, or ``fallback``.

    Returns ``(ml_or_callable, center)`` for ``validate_bound``.
    """
    if isinstance(problem, QuadraticProblem):
        return (lambda start, radius: problem.constants_on_ball(problem.x_star, radius, start),
                problem.x_star)
    if isinstance(problem, LogisticProblem):
        return (lambda start, radius: problem.known_constants(start)), None
    if fallback is None:
        raise ValueError("no provable constants for this problem; supply them in the config")
    return fallback, None


def random_config(problem: MLProblem, L: float, rng: np.random.Generator,
                  max_rounds: int = 40) -> tuple[AlgorithmParams, SystemProfile]:
    """Random integers, step-size rule with steps in (0, 1/L], and quantization levels."""
    N = problem.N
    K = (int(rng.integers(5, max_rounds + 1)),) + tuple(int(k) for k in rng.integers(1, 6, size=N))
    B = int(rng.integers(1, 9))
    gamma = float(np.exp(rng.uniform(np.log(0.05), np.log(1.0)))) / L
    kind = rng.integers(3)
    if kind == 0:
        rule = ConstantStep(gamma)
    elif kind == 1:
        rule = ExponentialStep(gamma, float(rng.uniform(0.8, 0.99)))
    else:
        rule = DiminishingStep(gamma, float(rng.uniform(1.0, 50.0)))
    levels = tuple(LEVEL_CHOICES[i] for i in rng.integers(len(LEVEL_CHOICES), size=N + 1))
    ones = np.ones(N + 1)
    sys = SystemProfile(F=ones, p=ones, r=ones, s=levels, C=ones, alpha=ones, dim=problem.dim)
    return AlgorithmParams(K, B, rule), sys


def _one(args) -> BoundReport:
    problem, params, sys, trials, seed, fallback = args
    ml, center = region_constants(problem, fallback)
    return validate_bound(problem, params, sys, ml, trials, seed, center=center)


@dataclass
class BoundStudy:
    configs: list[tuple[AlgorithmParams, SystemProfile]]
    reports: list[BoundReport]

    @property
    def pass_rate(self) -> float:
        return sum(r.passed for r in self.reports) / len(self.reports)

    @property
    def strict_pass_rate(self) -> float:
        """Share of configs whose mean metric is below the bound with no slack."""
        return sum(r.ratio <= 1.0 for r in self.reports) / len(self.reports)


def bound_study(problem: MLProblem, count: int, trials: int, seed: int, jobs: int = 1,
                fallback: MLConstants | None = None) -> BoundStudy:
    """Validate the bound on ``count`` random configurations."""
    if count < 1:
        raise ValueError("need at least one configuration")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    if isinstance(problem, QuadraticProblem):
        L = problem.smoothness()
    elif isinstance(problem, LogisticProblem):
        L = problem.known_constants(1.0).L
    elif fallback is not None:
        L = fallback.L
    else:
        raise ValueError("no smoothness constant available for this problem")
    configs = [random_config(problem, L, rng) for _ in range(count)]
    tasks = [(problem, p, s, trials, seed * 1000 + i, fallback) for i, (p, s) in enumerate(configs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_one, tasks))
    else:
        reports = [_one(t) for t in tasks]
    return BoundStudy(configs, reports)
