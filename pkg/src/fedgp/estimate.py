"""Sampling estimates of smoothness, gradient variance and gradient second moment."""

from __future__ import annotations

import math

import numpy as np

from .costs import MLConstants
from .problems import MLProblem
from .sim import _root_seed, initial_model

SIGMA_FLOOR = 1e-12


def estimate_ml_constants(problem: MLProblem, sample_budget: int, rng=0, safety: float = 1.1,
                          power_steps: int = 8, per_worker_samples: int = 32, spread: float = 1.0,
                          f_init: float | None = None) -> MLConstants:
    """Estimate ``(L, sigma, G)`` from ``sample_budget`` gradient-difference pairs.

    Base points are drawn like the simulator's initial model (scaled by
    ``spread``). From each base point a few power-iteration pairs chase the
    direction of largest curvature of one worker's local objective, so the
    ratio ``||grad(x) - grad(y)|| / ||x - y||`` approaches the local top
    eigenvalue instead of an average one. At each base point the per-sample
    gradients of a random subset of that worker's samples give the variance
    and squared-norm estimates. Every estimate is taken as a maximum and then
    multiplied by ``safety``; ``sigma`` is floored at 1e-12.
    """
    if int(sample_budget) < 1:
        raise ValueError("sample budget must be positive")
    if safety < 1.0:
        raise ValueError("safety factor must be at least 1")
    seed = _root_seed(rng)
    gen = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    dim, N = problem.dim, problem.N
    points = max(1, math.ceil(int(sample_budget) / power_steps))
    L_hat, var_hat, sq_hat = 0.0, 0.0, 0.0
    used = 0
    for j in range(points):
        n = j % N
        x = gen.normal(scale=spread / math.sqrt(dim), size=dim)
        gx = problem.local_grad(x, n)

        size = problem.samples_per_worker[n]
        pick = gen.choice(size, size=min(per_worker_samples, size), replace=False)
        per = problem.sample_grads(x, n, pick)
        var_hat = max(var_hat, float(np.mean(np.sum((per - gx) ** 2, axis=1))))
        sq_hat = max(sq_hat, float(np.max(np.sum(per * per, axis=1))))

        u = gen.normal(size=dim)
        h = 1e-3 * max(1.0, float(np.linalg.norm(x)))
        for _ in range(power_steps):
            if used >= sample_budget:
                break
            norm = float(np.linalg.norm(u))
            if norm == 0.0 or not math.isfinite(norm):
                u = gen.normal(size=dim)  # zero-distance pair: resample
                continue
            step = h * u / norm
            diff = problem.local_grad(x + step, n) - gx
            used += 1
            L_hat = max(L_hat, float(np.linalg.norm(diff)) / float(np.linalg.norm(step)))
            u = diff
    if sq_hat <= 0.0:
        raise ValueError("sampled gradients are all zero; the second-moment bound G must be positive")
    if L_hat <= 0.0:
        raise ValueError("sampled gradient differences are all zero; cannot estimate smoothness")
    if f_init is None:
        f_init = problem.loss(initial_model(seed, dim))
    f_star = problem.f_star if problem.f_star is not None else 0.0
    return MLConstants(L=safety * L_hat, sigma=max(safety * math.sqrt(var_hat), SIGMA_FLOOR),
                       G=safety * math.sqrt(sq_hat), f_init=max(float(f_init), f_star),
                       f_star_lb=f_star, D=dim)
