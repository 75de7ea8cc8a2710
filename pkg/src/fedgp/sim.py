"""Simulation of quantized parallel mini-batch SGD with local updates.

Each global round the workers copy the recovered model, run ``K_n`` mini-batch
SGD steps, and upload their quantized model change. The server averages the
uploads, quantizes the average, and broadcasts it; server and workers add the
broadcast to their copy of the recovered model.

Randomness comes from streams derived from one root seed by (purpose, round,
worker), so results do not depend on the order in which workers run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .costs import AlgorithmParams, MLConstants, SystemProfile, conv_error_general
from .problems import MLProblem
from .quantizer import Quantizer

INIT, SAMPLING, UPLINK, DOWNLINK = 0, 1, 2, 3


class RecordLevel(str, Enum):
    SUMMARY = "summary"  # per-round bits and losses
    SYNC = "sync"  # plus the synchronized averages needed by the convergence metric
    FULL = "full"  # plus recovered models, global updates, and final local models


def stream(seed: int, purpose: int, round_: int, worker: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, round_, worker)))


def initial_model(seed: int, dim: int) -> np.ndarray:
    """Server's starting point: Gaussian with per-coordinate scale 1/sqrt(dim)."""
    return stream(seed, INIT, 0, 0).normal(scale=1.0 / math.sqrt(dim), size=dim)


def draw_batch(rng: np.random.Generator, samples: int, B: int) -> np.ndarray:
    """Uniform with replacement from the local store."""
    return rng.integers(0, samples, size=B)


def _root_seed(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2 ** 63))
    if rng is None or int(rng) < 0:
        raise ValueError("seed must be a non-negative integer or a numpy Generator")
    return int(rng)


@dataclass
class RoundRecord:
    round: int
    gamma: float
    uplink_bits: float
    downlink_bits: float
    loss: float = math.nan  # training loss after the round
    recovered: np.ndarray | None = None  # model the round started from
    update: np.ndarray | None = None  # quantized global update
    local_models: list[np.ndarray] | None = None

    @property
    def bits(self) -> float:
        return self.uplink_bits + self.downlink_bits


@dataclass
class Trajectory:
    params: AlgorithmParams
    seed: int
    level: RecordLevel
    rounds: list[RoundRecord]
    start_model: np.ndarray  # recovered model before the first round
    final_model: np.ndarray
    start_loss: float
    initial_downlink_bits: float
    active_workers: np.ndarray  # workers still updating at local step k = 1..max K_n
    sync: list[np.ndarray] | None = None  # per round, averages at local steps 0..max K_n - 1
    max_distance: float = math.nan  # farthest iterate from the tracked center

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.rounds])

    @property
    def final_loss(self) -> float:
        return self.rounds[-1].loss

    @property
    def uplink_bits(self) -> float:
        return math.fsum(r.uplink_bits for r in self.rounds)

    @property
    def downlink_bits(self) -> float:
        return self.initial_downlink_bits + math.fsum(r.downlink_bits for r in self.rounds)


def _validate(problem: MLProblem, params: AlgorithmParams, sys: SystemProfile):
    if not params.is_integral():
        raise ValueError("simulation needs integer K and B")
    if len(params.K) != problem.N + 1:
        raise ValueError(f"K lists {len(params.K) - 1} workers but the problem has {problem.N}")
    if sys.N != problem.N:
        raise ValueError(f"system has {sys.N} workers but the problem has {problem.N}")
    if sys.dim != problem.dim:
        raise ValueError(f"system dimension {sys.dim} differs from the model dimension {problem.dim}")
    gammas = np.asarray(params.rule.sequence(int(params.K0)), dtype=float)
    if not np.all(np.isfinite(gammas)) or np.any(gammas < 0):
        raise ValueError("step sizes must be finite and non-negative")
    return gammas


def active_worker_counts(local_iterations) -> np.ndarray:
    """``N_k``: number of workers with at least ``k`` local steps, ``k = 1..max``."""
    Kn = np.asarray(local_iterations, dtype=int)
    return np.array([int(np.sum(Kn >= k)) for k in range(1, int(Kn.max()) + 1)])


def run_genqsgd(problem: MLProblem, params: AlgorithmParams, sys: SystemProfile, rng=0,
                record_level: RecordLevel | str = RecordLevel.SUMMARY, loss_every: int = 1,
                center: np.ndarray | None = None) -> Trajectory:
    """Run the algorithm once.

    ``rng`` is a root seed (or a Generator used to draw one). ``loss_every``
    controls how often the global training loss is evaluated (0: last round
    only). ``center``, if given, makes the run track the largest distance
    from it over every model the workers or server evaluate.
    """
    level = RecordLevel(record_level)
    gammas = _validate(problem, params, sys)
    seed = _root_seed(rng)
    K0 = int(params.K0)
    Kn = [int(k) for k in params.local]
    B = int(params.B)
    N, dim = problem.N, problem.dim
    sizes = problem.samples_per_worker
    server_q = Quantizer(sys.s[0])
    worker_q = [Quantizer(s) for s in sys.s[1:]]
    M = sys.M_values
    far = [0.0]

    def track(x):
        if center is not None:
            far[0] = max(far[0], float(np.linalg.norm(x - center)))

    # initial broadcast: workers start from zero and add the quantized model
    x0 = initial_model(seed, dim)
    broadcast, _ = server_q.quantize(x0, stream(seed, DOWNLINK, 0, 0))
    server = np.zeros(dim) + broadcast
    copies = [np.zeros(dim) + broadcast for _ in range(N)]
    track(server)
    start = server.copy()
    start_loss = problem.loss(server)

    rounds, sync = [], ([] if level != RecordLevel.SUMMARY else None)
    steps_max = max(Kn)
    for k0 in range(1, K0 + 1):
        gamma = float(gammas[k0 - 1])
        finals, deltas = [], []
        paths = []
        for n in range(N):
            x = copies[n]
            path = [x] if sync is not None else None
            rng_s = stream(seed, SAMPLING, k0, n)
            for _ in range(Kn[n]):
                idx = draw_batch(rng_s, sizes[n], B)
                x = x - gamma * problem.batch_grad(x, n, idx)
                track(x)
                if path is not None:
                    path.append(x)
            finals.append(x)
            paths.append(path)
            up, _ = worker_q[n].quantize(x - copies[n], stream(seed, UPLINK, k0, n))
            deltas.append(up)
        if sync is not None:
            # workers that finished early hold their last model
            sync.append(np.stack([np.mean(np.stack([p[min(k, len(p) - 1)] for p in paths]), axis=0)
                                  for k in range(steps_max)]))
            for row in sync[-1]:
                track(row)
        average = np.mean(np.stack(deltas), axis=0)
        update, _ = server_q.quantize(average, stream(seed, DOWNLINK, k0, 0))
        rec = RoundRecord(k0, gamma, float(np.sum(M[1:])), float(M[0]))
        if level == RecordLevel.FULL:
            rec.recovered, rec.update, rec.local_models = server.copy(), update.copy(), finals
        server = server + update
        copies = [c + update for c in copies]
        if not all(np.array_equal(c, server) for c in copies):
            raise RuntimeError("server and worker copies of the recovered model diverged")
        track(server)
        if (loss_every and k0 % loss_every == 0) or k0 == K0:
            rec.loss = problem.loss(server)
        rounds.append(rec)

    return Trajectory(params=params, seed=seed, level=level, rounds=rounds, start_model=start,
                      final_model=server, start_loss=start_loss, initial_downlink_bits=float(M[0]),
                      active_workers=active_worker_counts(Kn), sync=sync,
                      max_distance=far[0] if center is not None else math.nan)


def convergence_metric(traj: Trajectory, problem: MLProblem, params: AlgorithmParams | None = None) -> float:
    """Weighted average of squared full-gradient norms at the synchronized averages.

    Round ``k0``, local step ``k`` contributes ``gamma(k0) * N_k / N`` times
    ``||grad f(xbar(k0, k-1))||^2``; the weights are normalized to sum to one.
    """
    if traj.sync is None:
        raise ValueError("trajectory was recorded without synchronized averages")
    params = params or traj.params
    N = len(params.K) - 1
    share = active_worker_counts(params.local) / N
    gammas = np.asarray(params.rule.sequence(int(params.K0)), dtype=float)
    num, den = [], []
    for gamma, avgs in zip(gammas, traj.sync):
        for k, w in enumerate(share):
            g = problem.full_grad(avgs[k])
            num.append(gamma * w * float(g @ g))
            den.append(gamma * w)
    return math.fsum(num) / math.fsum(den)


@dataclass
class BoundReport:
    bound: float
    metrics: list[float]
    mean_metric: float
    std_error: float
    ratio: float
    slack: float
    passed: bool
    start_losses: list[float]
    max_distance: float
    ml: MLConstants | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("bound", "metrics", "mean_metric", "std_error", "ratio",
                                                 "slack", "passed", "start_losses", "max_distance")}
        if self.ml is not None:
            out["ml"] = {"L": self.ml.L, "sigma": self.ml.sigma, "G": self.ml.G,
                         "f_init": self.ml.f_init, "f_star_lb": self.ml.f_star_lb}
        out.update(self.extra)
        return out


def validate_bound(problem: MLProblem, params: AlgorithmParams, sys: SystemProfile,
                   ml: MLConstants | Callable[[float, float], MLConstants], trials: int, rng=0,
                   z: float = 2.0, center: np.ndarray | None = None) -> BoundReport:
    """Compare the trial-averaged convergence metric with the analytical bound.

    ``ml`` may be a callable ``(max_start_loss, max_distance) -> MLConstants``
    for constants that are only valid on the region the runs visited; the
    distance is measured from ``center`` when given. The check passes when
    the mean metric is at most ``bound + z * standard error``.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    root = _root_seed(rng)
    seeds = np.random.SeedSequence(root).generate_state(trials, dtype=np.uint64)
    metrics, starts, far = [], [], 0.0
    for s in seeds:
        traj = run_genqsgd(problem, params, sys, int(s), RecordLevel.SYNC, loss_every=0, center=center)
        metrics.append(convergence_metric(traj, problem, params))
        starts.append(traj.start_loss)
        if center is not None:
            far = max(far, traj.max_distance)
    if callable(ml):
        ml = ml(max(starts), far)
    bound = conv_error_general(params, sys, ml)
    mean = float(np.mean(metrics))
    se = float(np.std(metrics, ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    slack = z * se / bound
    return BoundReport(bound=bound, metrics=metrics, mean_metric=mean, std_error=se,
                       ratio=mean / bound, slack=slack, passed=mean / bound <= 1.0 + slack,
                       start_losses=starts, max_distance=far if center is not None else math.nan, ml=ml)
