import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgp.dataio import load_idx
from fedgp.estimate import estimate_ml_constants
from fedgp.problems import (LogisticProblem, MLPProblem, QuadraticProblem, make_mnist_mlp,
                            make_synthetic)

DATA = Path(__file__).parent / "data"


def central_difference(fun, x, coords, h=1e-6):
    out = []
    for i in coords:
        e = np.zeros_like(x)
        e[i] = h
        out.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.array(out)


@pytest.fixture(scope="module")
def mnist_small():
    X = load_idx(DATA / "mnist2k-images-idx3-ubyte.gz", expect="images", scale=True)
    y = load_idx(DATA / "mnist2k-labels-idx1-ubyte.gz", expect="labels")
    return make_mnist_mlp(X[:60], y[:60], N=3, seed=0)


def test_identity_quadratic():
    S, D = 6, 4
    A = np.broadcast_to(np.eye(D), (S, D, D)).copy()
    p = QuadraticProblem(A, np.zeros((S, D)), [np.arange(3), np.arange(3, 6)])
    assert p.f_star == 0.0
    assert p.smoothness() == 1.0


@pytest.mark.parametrize("kind", ["quadratic", "logistic"])
def test_synthetic_gradients_match_finite_differences(kind):
    p = make_synthetic(kind, D=8, samples_per_worker=5, N=3, seed=4)
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.normal(size=p.dim)
        n = int(rng.integers(p.N))
        i = int(rng.integers(p.samples_per_worker[n]))
        fd = central_difference(lambda z: p.sample_loss(z, n, i), x, range(p.dim))
        g = p.sample_grad(x, n, i)
        assert np.linalg.norm(fd - g) <= 1e-5 * np.linalg.norm(g)
        fd = central_difference(p.loss, x, range(p.dim))
        assert np.linalg.norm(fd - p.full_grad(x)) <= 1e-5 * np.linalg.norm(p.full_grad(x))


@pytest.mark.parametrize("kind", ["quadratic", "logistic"])
def test_synthetic_is_seeded(kind):
    a = make_synthetic(kind, 5, 4, 2, seed=9)
    b = make_synthetic(kind, 5, 4, 2, seed=9)
    c = make_synthetic(kind, 5, 4, 2, seed=10)
    x = np.linspace(-1, 1, 5)
    assert a.loss(x) == b.loss(x)
    assert all(np.array_equal(s, t) for s, t in zip(a.shards, b.shards))
    assert a.loss(x) != c.loss(x)


def test_synthetic_rejects_bad_sizes():
    with pytest.raises(ValueError):
        make_synthetic("quadratic", 0, 3, 2, 0)
    with pytest.raises(ValueError):
        make_synthetic("cubic", 3, 3, 2, 0)


def test_quadratic_smoothness_is_top_eigenvalue():
    p = make_synthetic("quadratic", D=6, samples_per_worker=10, N=3, seed=1, rows=2)
    # singular values of the stacked rows of each worker, independent of the Hessian route
    expected = max(np.linalg.svd(p.A[s].reshape(-1, p.dim), compute_uv=False)[0] ** 2 / len(s)
                   for s in p.shards)
    assert abs(p.smoothness() - expected) <= 1e-10 * expected


def test_quadratic_minimizer():
    p = make_synthetic("quadratic", D=5, samples_per_worker=8, N=2, seed=3)
    assert np.linalg.norm(p.full_grad(p.x_star)) < 1e-12
    rng = np.random.default_rng(1)
    assert all(p.loss(p.x_star + 0.1 * rng.normal(size=5)) >= p.f_star for _ in range(20))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_ball_constants_hold_inside_ball(seed, radius):
    p = make_synthetic("quadratic", D=4, samples_per_worker=6, N=2, seed=seed % 7)
    ml = p.constants_on_ball(p.x_star, radius, f_init=1.0)
    rng = np.random.default_rng(seed)
    for _ in range(10):
        u = rng.normal(size=4)
        x = p.x_star + radius * rng.random() * u / np.linalg.norm(u)
        for n in range(p.N):
            g = p.sample_grads(x, n, np.arange(6))
            gn = p.local_grad(x, n)
            assert np.mean(np.sum(g * g, axis=1)) <= ml.G ** 2 * (1 + 1e-12)
            assert np.mean(np.sum((g - gn) ** 2, axis=1)) <= ml.sigma ** 2 * (1 + 1e-12)


def test_logistic_constants_hold_everywhere():
    p = make_synthetic("logistic", D=5, samples_per_worker=20, N=2, seed=0)
    ml = p.known_constants(f_init=1.0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, z = rng.normal(scale=5, size=(2, 5))
        for n in range(p.N):
            g = p.sample_grads(x, n, np.arange(20))
            assert np.mean(np.sum(g * g, axis=1)) <= ml.G ** 2
            d = p.local_grad(x, n) - p.local_grad(z, n)
            assert np.linalg.norm(d) <= ml.L * np.linalg.norm(x - z) * (1 + 1e-12)


def test_logistic_rejects_bad_labels():
    with pytest.raises(ValueError):
        LogisticProblem(np.ones((2, 2)), np.array([0.0, 1.0]), [np.arange(2)])


def test_mlp_dimension(mnist_small):
    assert mnist_small.dim == 784 * 128 + 128 + 128 * 10 + 10 == 101_770


def test_mlp_softmax_normalized(mnist_small):
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.normal(scale=0.5, size=mnist_small.dim)
        prob = mnist_small.probabilities(x, np.arange(60))
        assert np.max(np.abs(prob.sum(axis=1) - 1.0)) <= 1e-12


def test_mlp_gradient_matches_finite_differences(mnist_small):
    p = mnist_small
    rng = np.random.default_rng(5)
    x = rng.normal(scale=0.1, size=p.dim)
    W1 = 784 * 128
    # half the coordinates from the first layer on pixels that are lit in the sample
    lit = np.flatnonzero(p.X[p.shards[0][0]] > 0)
    coords = [int(h) * 784 + int(j) for h, j in zip(rng.integers(0, 128, 10), rng.choice(lit, 10))]
    coords += list(rng.integers(W1, p.dim, size=10))
    fd = central_difference(lambda z: p.sample_loss(z, 0, 0), x, coords)
    g = p.sample_grad(x, 0, 0)[coords]
    assert np.linalg.norm(fd - g) <= 1e-4 * np.linalg.norm(g)
    fd = central_difference(lambda z: p.local_loss(z, 1), x, coords)
    g = p.local_grad(x, 1)[coords]
    assert np.linalg.norm(fd - g) <= 1e-4 * np.linalg.norm(g)


def test_mlp_batch_gradient_is_mean_of_sample_gradients(mnist_small):
    x = np.random.default_rng(2).normal(scale=0.1, size=mnist_small.dim)
    idx = np.array([0, 3, 3, 7])
    per = mnist_small.sample_grads(x, 1, idx)
    assert np.allclose(mnist_small.batch_grad(x, 1, idx), per.mean(axis=0), rtol=1e-12, atol=1e-15)


def test_mlp_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        make_mnist_mlp(np.zeros((4, 27, 27)), np.zeros(4, dtype=int), 2, 0)
    with pytest.raises(ValueError):
        MLPProblem(np.zeros((4, 784)), np.zeros(3, dtype=int), [np.arange(4)])


# ---------------------------------------------------------------------------
# Constant estimation


def test_estimated_smoothness_close_to_analytic():
    p = make_synthetic("quadratic", D=10, samples_per_worker=30, N=3, seed=2)
    ml = estimate_ml_constants(p, 200, rng=0, safety=1.0)
    assert abs(ml.L - p.smoothness()) <= 0.1 * p.smoothness()
    assert ml.L <= p.smoothness() * (1 + 1e-9)


def test_estimate_applies_safety_factor():
    p = make_synthetic("logistic", D=6, samples_per_worker=20, N=2, seed=1)
    raw = estimate_ml_constants(p, 40, rng=3, safety=1.0)
    safe = estimate_ml_constants(p, 40, rng=3)
    assert math.isclose(safe.L, 1.1 * raw.L) and math.isclose(safe.G, 1.1 * raw.G)


def test_estimate_zero_gradients_rejected():
    p = QuadraticProblem(np.zeros((4, 1, 3)), np.zeros((4, 1)), [np.arange(2), np.arange(2, 4)])
    with pytest.raises(ValueError):
        estimate_ml_constants(p, 20)


def test_estimate_deterministic_problem_has_floor_variance():
    p = make_synthetic("quadratic", D=4, samples_per_worker=1, N=3, seed=0)
    ml = estimate_ml_constants(p, 24)
    assert ml.sigma == 1e-12


def test_estimate_budget_must_be_positive():
    with pytest.raises(ValueError):
        estimate_ml_constants(make_synthetic("quadratic", 3, 2, 2, 0), 0)
