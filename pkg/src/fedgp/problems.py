"""Learning problems with per-sample losses and gradients, split across workers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .costs import MLConstants
from .dataio import shard_uniform


class MLProblem:
    """Base class: a dataset of samples sharded over ``N`` workers.

    Subclasses implement ``_losses(x, idx)`` and ``_grads(x, idx)`` (per
    sample, global indices) and ``_mean_grad(x, idx)``.
    """

    dim: int
    shards: list[np.ndarray]
    f_star: float | None = None

    @property
    def N(self) -> int:
        return len(self.shards)

    @property
    def samples_per_worker(self) -> list[int]:
        return [len(s) for s in self.shards]

    def _global(self, n: int, idx) -> np.ndarray:
        return self.shards[n][np.asarray(idx, dtype=np.intp)]

    # per-sample interface; n is a 0-based worker index, idx local indices
    def sample_loss(self, x, n: int, i: int) -> float:
        return float(self._losses(x, self._global(n, [i]))[0])

    def sample_grad(self, x, n: int, i: int) -> np.ndarray:
        return self._grads(x, self._global(n, [i]))[0]

    def sample_grads(self, x, n: int, idx) -> np.ndarray:
        return self._grads(x, self._global(n, idx))

    def batch_grad(self, x, n: int, idx) -> np.ndarray:
        """Average gradient over the local samples ``idx`` (repeats count)."""
        return self._mean_grad(x, self._global(n, idx))

    def local_loss(self, x, n: int) -> float:
        return float(np.mean(self._losses(x, self.shards[n])))

    def local_grad(self, x, n: int) -> np.ndarray:
        return self._mean_grad(x, self.shards[n])

    def loss(self, x) -> float:
        """Global objective: the mean of the workers' local objectives."""
        return math.fsum(self.local_loss(x, n) for n in range(self.N)) / self.N

    def full_grad(self, x) -> np.ndarray:
        return np.mean(np.stack([self.local_grad(x, n) for n in range(self.N)]), axis=0)

    def _losses(self, x, idx):
        raise NotImplementedError

    def _grads(self, x, idx):
        raise NotImplementedError

    def _mean_grad(self, x, idx):
        return np.mean(self._grads(x, idx), axis=0)


# ---------------------------------------------------------------------------
# Quadratic least squares


class QuadraticProblem(MLProblem):
    """Per-sample loss ``0.5 * ||A_i x - b_i||^2``."""

    def __init__(self, A: np.ndarray, b: np.ndarray, shards: list[np.ndarray]):
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        if A.ndim != 3 or b.shape != A.shape[:2]:
            raise ValueError("A must be (samples, rows, dim) and b (samples, rows)")
        self.A, self.b = A, b
        self.dim = A.shape[2]
        self.shards = [np.asarray(s, dtype=np.intp) for s in shards]
        H = np.einsum("smd,sme->de", A, A) / A.shape[0]
        g = np.einsum("smd,sm->d", A, b) / A.shape[0]
        self.x_star = np.linalg.lstsq(H, g, rcond=None)[0]
        self.f_star = self.loss(self.x_star)

    def _residuals(self, x, idx):
        return np.einsum("smd,d->sm", self.A[idx], x) - self.b[idx]

    def _losses(self, x, idx):
        r = self._residuals(x, idx)
        return 0.5 * np.sum(r * r, axis=1)

    def _grads(self, x, idx):
        return np.einsum("smd,sm->sd", self.A[idx], self._residuals(x, idx))

    def _mean_grad(self, x, idx):
        return np.einsum("smd,sm->d", self.A[idx], self._residuals(x, idx)) / len(idx)

    def local_hessian(self, n: int) -> np.ndarray:
        A = self.A[self.shards[n]]
        return np.einsum("smd,sme->de", A, A) / len(self.shards[n])

    def smoothness(self) -> float:
        """Largest eigenvalue over the workers' local Hessians."""
        return max(float(np.linalg.eigvalsh(self.local_hessian(n))[-1]) for n in range(self.N))

    def constants_on_ball(self, center: np.ndarray, radius: float, f_init: float) -> MLConstants:
        """Smoothness, variance and second-moment bounds valid on a ball.

        For ``x`` within ``radius`` of ``center``, the per-sample gradient is
        affine in ``x``, so ``||g_i(x)|| <= ||g_i(c)|| + ||H_i|| r`` and the
        deviation from the local mean obeys the same with ``H_i - H_n``.
        """
        G2, s2 = 0.0, 0.0
        for n in range(self.N):
            idx = self.shards[n]
            A = self.A[idx]
            Hi = np.einsum("smd,sme->sde", A, A)
            Hn = Hi.mean(axis=0)
            gi = self._grads(center, idx)
            gn = gi.mean(axis=0)
            hnorm = np.linalg.norm(Hi, ord=2, axis=(1, 2))
            dnorm = np.linalg.norm(Hi - Hn, ord=2, axis=(1, 2))
            G2 = max(G2, float(np.mean((np.linalg.norm(gi, axis=1) + hnorm * radius) ** 2)))
            s2 = max(s2, float(np.mean((np.linalg.norm(gi - gn, axis=1) + dnorm * radius) ** 2)))
        return MLConstants(L=self.smoothness(), sigma=max(math.sqrt(s2), 1e-12), G=math.sqrt(G2),
                           f_init=f_init, f_star_lb=self.f_star)


# ---------------------------------------------------------------------------
# Logistic regression


class LogisticProblem(MLProblem):
    """Binary cross-entropy ``log(1 + exp(-y a^T x))`` with labels in {-1, +1}."""

    def __init__(self, features: np.ndarray, labels: np.ndarray, shards: list[np.ndarray]):
        self.X = np.asarray(features, dtype=float)
        self.y = np.asarray(labels, dtype=float)
        if set(np.unique(self.y)) - {-1.0, 1.0}:
            raise ValueError("labels must be -1 or +1")
        self.dim = self.X.shape[1]
        self.shards = [np.asarray(s, dtype=np.intp) for s in shards]

    def _margins(self, x, idx):
        return self.y[idx] * (self.X[idx] @ x)

    def _losses(self, x, idx):
        return -log_expit(self._margins(x, idx))

    def _grads(self, x, idx):
        w = -self.y[idx] * expit(-self._margins(x, idx))
        return w[:, None] * self.X[idx]

    def _mean_grad(self, x, idx):
        w = -self.y[idx] * expit(-self._margins(x, idx))
        return (w @ self.X[idx]) / len(idx)

    def known_constants(self, f_init: float) -> MLConstants:
        """Global bounds: Hessian <= mean(a a^T)/4, gradient norms <= ||a||."""
        L, G2 = 0.0, 0.0
        for s in self.shards:
            Xs = self.X[s]
            L = max(L, float(np.linalg.eigvalsh(Xs.T @ Xs / len(s))[-1]) / 4.0)
            G2 = max(G2, float(np.mean(np.sum(Xs * Xs, axis=1))))
        # variance is at most the second moment
        return MLConstants(L=L, sigma=math.sqrt(G2), G=math.sqrt(G2), f_init=f_init, f_star_lb=0.0)


def make_synthetic(kind: str, D: int, samples_per_worker: int, N: int, seed: int,
                   rows: int = 1) -> MLProblem:
    """Seeded synthetic problem; ``kind`` is ``"quadratic"`` or ``"logistic"``."""
    if D < 1 or N < 1 or samples_per_worker < 1:
        raise ValueError("D, N and samples_per_worker must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    S = samples_per_worker * N
    shards = shard_uniform(S, N, seed).shards
    if kind == "quadratic":
        A = rng.normal(size=(S, rows, D)) / math.sqrt(D)
        x_true = rng.normal(size=D)
        b = np.einsum("smd,d->sm", A, x_true) + 0.1 * rng.normal(size=(S, rows))
        return QuadraticProblem(A, b, shards)
    if kind == "logistic":
        X = rng.uniform(-1.0, 1.0, size=(S, D)) / math.sqrt(D)
        w = rng.normal(size=D) * 3.0
        p = expit(X @ w * math.sqrt(D))
        y = np.where(rng.random(S) < p, 1.0, -1.0)
        return LogisticProblem(X, y, shards)
    raise ValueError(f"unknown synthetic problem {kind!r}")


# ---------------------------------------------------------------------------
# MNIST multilayer perceptron


@dataclass(frozen=True)
class MLPShape:
    inputs: int = 784
    hidden: int = 128
    classes: int = 10

    @property
    def dim(self) -> int:
        return self.inputs * self.hidden + self.hidden + self.hidden * self.classes + self.classes


class MLPProblem(MLProblem):
    """One sigmoid hidden layer, softmax output, cross-entropy loss."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, shards: list[np.ndarray],
                 hidden: int = 128, classes: int = 10):
        images = np.asarray(images, dtype=float)
        if images.ndim == 3:
            images = images.reshape(images.shape[0], -1)
        labels = np.asarray(labels, dtype=np.intp)
        if images.shape[0] != labels.shape[0]:
            raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if labels.min() < 0 or labels.max() >= classes:
            raise ValueError("label out of range")
        self.X, self.labels = images, labels
        self.shape = MLPShape(images.shape[1], hidden, classes)
        self.dim = self.shape.dim
        self.shards = [np.asarray(s, dtype=np.intp) for s in shards]

    def unpack(self, x):
        d, h, c = self.shape.inputs, self.shape.hidden, self.shape.classes
        i = 0
        W1 = x[i:i + h * d].reshape(h, d); i += h * d
        b1 = x[i:i + h]; i += h
        W2 = x[i:i + c * h].reshape(c, h); i += c * h
        b2 = x[i:i + c]
        return W1, b1, W2, b2

    def forward(self, x, idx):
        W1, b1, W2, b2 = self.unpack(x)
        hid = expit(self.X[idx] @ W1.T + b1)
        logits = hid @ W2.T + b2
        return hid, logits

    def probabilities(self, x, idx) -> np.ndarray:
        _, logits = self.forward(x, idx)
        return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))

    def accuracy(self, x, images: np.ndarray, labels: np.ndarray) -> float:
        """Top-1 accuracy on held-out data."""
        W1, b1, W2, b2 = self.unpack(x)
        feats = np.asarray(images, dtype=float).reshape(len(labels), -1)
        logits = expit(feats @ W1.T + b1) @ W2.T + b2
        return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))

    def _losses(self, x, idx):
        _, logits = self.forward(x, idx)
        return logsumexp(logits, axis=1) - logits[np.arange(len(idx)), self.labels[idx]]

    def _backward(self, x, idx):
        W1, b1, W2, b2 = self.unpack(x)
        hid, logits = self.forward(x, idx)
        dz = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        dz[np.arange(len(idx)), self.labels[idx]] -= 1.0
        dh = (dz @ W2) * hid * (1.0 - hid)
        return hid, dz, dh

    def _mean_grad(self, x, idx):
        hid, dz, dh = self._backward(x, idx)
        m = len(idx)
        return np.concatenate([(dh.T @ self.X[idx]).ravel() / m, dh.sum(axis=0) / m,
                               (dz.T @ hid).ravel() / m, dz.sum(axis=0) / m])

    def _grads(self, x, idx):
        hid, dz, dh = self._backward(x, idx)
        m = len(idx)
        Xi = self.X[idx]
        return np.concatenate([np.einsum("sh,sd->shd", dh, Xi).reshape(m, -1), dh,
                               np.einsum("sc,sh->sch", dz, hid).reshape(m, -1), dz], axis=1)


def make_mnist_mlp(images: np.ndarray, labels: np.ndarray, N: int, seed: int,
                   hidden: int = 128) -> MLPProblem:
    """MLP classifier over ``images`` sharded uniformly across ``N`` workers."""
    if images.ndim == 3:
        if images.shape[1:] != (28, 28):
            raise ValueError(f"expected 28x28 images, got {images.shape[1:]}")
    elif images.ndim != 2 or images.shape[1] != 784:
        raise ValueError(f"expected 784 features, got shape {images.shape}")
    shards = shard_uniform(images.shape[0], N, seed).shards
    return MLPProblem(images, labels, shards, hidden=hidden)
