"""Integer projection of a relaxed optimizer iterate."""

from __future__ import annotations

import heapq
import itertools
import math

import numpy as np
from scipy.optimize import brentq

from ..costs import (AlgorithmParams, ConstantStep, DiminishingStep, ExponentialStep, conv_error,
                     derived_constants, diminishing_coefficients, energy_cost,
                     exponential_coefficients, time_cost)

FULL_ENUMERATION = 4096
NEAREST_CANDIDATES = 256
MAX_BATCH_SCAN = 64
BATCH_WINDOW = 32


class RoundingFailed(RuntimeError):
    pass


def _choices(v: float) -> list[int]:
    lo = max(1, math.floor(v + 1e-9))
    hi = max(1, math.ceil(v - 1e-9))
    return [lo] if lo == hi else [lo, hi]


def _nearest_combinations(values, choices, limit):
    """Up to ``limit`` combinations ordered by total rounding distance."""
    total = math.prod(len(c) for c in choices)
    if total <= FULL_ENUMERATION:
        yield from itertools.product(*choices)
        return
    # each coordinate: cheapest choice first, then the extra distance of the other
    base = []
    extras = []
    for v, c in zip(values, choices):
        ordered = sorted(c, key=lambda k: abs(k - v))
        base.append(ordered[0])
        extras.append(abs(ordered[-1] - v) - abs(ordered[0] - v) if len(ordered) > 1 else math.inf)
    alt = [sorted(c, key=lambda k: abs(k - v))[-1] for v, c in zip(values, choices)]
    order = [i for i in np.argsort(extras, kind="stable") if math.isfinite(extras[i])]
    cost = [extras[i] for i in order]

    def combo(flips):
        out = list(base)
        for j in flips:
            out[order[j]] = alt[order[j]]
        return tuple(out)

    # subsets of flips in order of summed extra distance: from the subset
    # ending at j, either extend with j+1 or move the last flip to j+1
    yield combo(())
    heap = [(cost[0], (0,))] if order else []
    count = 1
    while heap and count < limit:
        c, flips = heapq.heappop(heap)
        yield combo(flips)
        count += 1
        j = flips[-1]
        if j + 1 < len(order):
            heapq.heappush(heap, (c + cost[j + 1], flips + (j + 1,)))
            heapq.heappush(heap, (c - cost[j] + cost[j + 1], flips[:-1] + (j + 1,)))


def _best_gamma(tpl, K, B) -> float:
    """Step size minimizing the convergence error for fixed integers.

    With ``K`` and ``B`` fixed the error is ``a/g + c g^2 + d g``, convex on
    ``g > 0``; its minimizer is the positive root of ``2c g^3 + d g^2 - a``,
    clipped to ``1/L``.
    """
    c1, c2, c3, c4 = derived_constants(tpl.ml, tpl.N)
    Kn = np.asarray(K[1:], dtype=float)
    sK = math.fsum(Kn)
    a = c1 / (K[0] * sK)
    c = c2 * float(Kn.max()) ** 2
    d = c3 / B + c4 * math.fsum(tpl.sys.q_combined() * Kn ** 2) / sK
    hi = max((a / (2 * c)) ** (1 / 3), math.sqrt(a / d) if d > 0 else 0.0)
    root = brentq(lambda g: (2 * c * g + d) * g * g - a, 0.0, hi, xtol=1e-15, rtol=1e-14)
    return min(root, 1.0 / tpl.ml.L)


def _limit_ok(value: float, limit: float, tol: float) -> bool:
    return value <= limit * (1 + tol)


class _LeastRounds:
    """Fewest global rounds that meet the error limit for fixed local counts and batch.

    Time and energy grow linearly in ``K0`` while the error bound falls, so
    for fixed ``(K1..KN, B)`` the cheapest feasible point uses the smallest
    ``K0`` meeting the error limit, provided that ``K0`` also meets the time
    limit.
    """

    def __init__(self, tpl, x, tol):
        self.tpl, self.tol = tpl, tol
        self.full = "gamma" in tpl.variables
        self.rule = None if self.full else tpl.rule(x)
        self.c = derived_constants(tpl.ml, tpl.N)
        self.q = tpl.sys.q_combined()

    def params(self, K0: int, Kn: tuple, B: int) -> AlgorithmParams:
        K = (K0,) + Kn
        rule = ConstantStep(_best_gamma(self.tpl, K, B)) if self.full else self.rule
        return AlgorithmParams(K, B, rule)

    def _meets_error(self, K0: int, Kn: tuple, B: int) -> bool:
        tpl = self.tpl
        return _limit_ok(conv_error(self.params(K0, Kn, B), tpl.sys, tpl.ml), tpl.limits.C_max,
                         self.tol)

    def cap(self, Kn: tuple, B: int) -> int:
        """Largest K0 allowed by the time limit (0 when even one round is too slow)."""
        tpl = self.tpl
        per_round = time_cost(AlgorithmParams((1,) + Kn, B, ConstantStep(1.0)), tpl.sys)
        return int(math.floor(tpl.limits.T_max * (1 + self.tol) / per_round))

    def guess(self, Kn: tuple, B: int) -> float:
        """Real-valued K0 where the error bound reaches the limit (inf if it never does)."""
        tpl = self.tpl
        c1, c2, c3, c4 = self.c
        k = np.asarray(Kn, dtype=float)
        sK = math.fsum(k)
        curv = c2 * float(k.max()) ** 2
        slope = c3 / B + c4 * math.fsum(self.q * k ** 2) / sK
        C = tpl.limits.C_max
        rule = self.rule
        if isinstance(rule, ExponentialStep):
            a1, a2, a3 = exponential_coefficients(rule.gamma, rule.rho)
            head, P, Q = a1 * c1 / sK, a2 * curv, a3 * slope

            def excess(X):
                return head / (1 - X) + P * (1 + X + X * X) + Q * (1 + X) - C
            if excess(0.0) >= 0:
                return math.inf
            X = brentq(excess, 0.0, 1.0 - 1e-15, xtol=1e-300, rtol=1e-15) \
                if excess(1.0 - 1e-15) > 0 else 1.0 - 1e-15
            return math.log(X) / math.log(rule.rho) if X > 0 else 1.0
        if isinstance(rule, DiminishingStep):
            b1, b2, b3 = diminishing_coefficients(rule.gamma, rule.rho)
            Z = b1 * c1 / sK + b2 * curv + b3 * slope
            return (rule.rho + 1.0) * math.expm1(min(Z / C, 700.0))
        if self.full:
            # maximize g (C - slope g - curv g^2) over (0, 1/L]
            if curv > 0:
                g = (-slope + math.sqrt(slope * slope + 3 * curv * C)) / (3 * curv)
            else:
                g = C / (2 * slope) if slope > 0 else math.inf
            g = min(g, 1.0 / tpl.ml.L)
        else:
            g = rule.gamma
        head = g * (C - slope * g - curv * g * g)
        return math.inf if head <= 0 else c1 / (sK * head)

    def solve(self, Kn: tuple, B: int, hint: float) -> AlgorithmParams | None:
        cap = self.cap(Kn, B)
        if cap < 1 or not self._meets_error(cap, Kn, B):
            return None
        lo, hi = 0, cap                      # error fails at lo (or lo = 0), holds at hi
        if math.isfinite(hint):
            # the closed form is exact up to roundoff, so probe next to it first
            k = min(cap, max(1, math.ceil(hint)))
            if not self._meets_error(k, Kn, B):
                lo = k
            elif k == 1 or not self._meets_error(k - 1, Kn, B):
                return self.params(k, Kn, B)
            else:
                hi = k - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self._meets_error(mid, Kn, B):
                hi = mid
            else:
                lo = mid
        return self.params(hi, Kn, B)


def _widened(v: float) -> list[int]:
    c = _choices(v)
    return sorted({k for k in range(c[0] - 1, c[-1] + 2) if k >= 1})


def _local_candidates(tpl, x):
    """(Kn tuple, B) pairs near the relaxed point; ``K0`` is solved for separately."""
    N = tpl.N
    # energy is nearly flat along B once K0 is re-solved, so look well beyond floor/ceil
    w = min(BATCH_WINDOW, max(2, math.ceil(0.5 * x["B"])))
    B_vals = [b for b in range(math.floor(x["B"]) - w, math.ceil(x["B"]) + w + 1) if b >= 1]
    if tpl.baseline == "fa":
        samples = tpl.samples
        out = set()
        for l, B in itertools.product(_widened(x["l"]), B_vals):
            out.add((tuple(max(1, int(round(l * samples[n] / B))) for n in range(N)), B))
        return out
    if tpl.baseline == "pm":
        return {((1,) * N, B) for B in B_vals}
    if tpl.baseline == "pr":
        B_vals = [1]
    values = [x[f"K{n}"] for n in range(1, N + 1)]
    wide = [_widened(v) for v in values]
    if math.prod(len(w) for w in wide) * len(B_vals) <= FULL_ENUMERATION:
        combos = itertools.product(*wide)
    else:
        combos = _nearest_combinations(values, [_choices(v) for v in values], NEAREST_CANDIDATES)
    return {(tuple(c), B) for c in combos for B in B_vals}


def _scaled_candidates(tpl, x):
    """Full mode: (Kn, B) pairs along the curve of equivalent relaxed points.

    Scaling the local iteration counts by ``a`` while dividing the batch size
    and step size by ``a`` leaves energy, time and error unchanged, so every
    integer batch size ``b`` gives another relaxed optimum to round from.
    """
    N = tpl.N
    B = x["B"]
    Kn = [x[f"K{n}"] for n in range(1, N + 1)]
    out = set()
    for b in range(1, min(MAX_BATCH_SCAN, math.ceil(B * max(Kn))) + 1):
        values = [k * B / b for k in Kn]
        choices = [_choices(v) for v in values]
        out.update((tuple(c), b) for c in _nearest_combinations(values, choices, NEAREST_CANDIDATES))
    return out


def round_to_integers(tpl, x, tol: float = 1e-9) -> AlgorithmParams:
    """Minimum-energy integer point near ``x`` that meets the original limits.

    Local counts and batch sizes are taken from a small neighbourhood of the
    relaxed values; for each pair the number of global rounds is the least
    one meeting the exact convergence error, and the pair is kept when that
    count also meets the time limit. Ties go to the lexicographically
    smallest (K0, K1, ..., B).
    """
    solver = _LeastRounds(tpl, x, tol)
    pairs = _local_candidates(tpl, x)
    if solver.full and tpl.baseline is None:
        pairs |= _scaled_candidates(tpl, x)

    def energy(K0, Kn, B):
        return energy_cost(AlgorithmParams((K0,) + Kn, B, ConstantStep(1.0)), tpl.sys)

    # visit pairs by an energy lower bound so most exact solves are skipped
    ranked = []
    for Kn, B in pairs:
        hint = solver.guess(Kn, B)
        if not math.isfinite(hint):
            continue
        floor_k0 = max(1, math.ceil(hint) - 1)
        if floor_k0 > solver.cap(Kn, B):
            continue
        ranked.append((energy(floor_k0, Kn, B), Kn, B, hint))
    ranked.sort(key=lambda t: (t[0], t[1], t[2]))

    best = None
    for bound, Kn, B, hint in ranked:
        if best is not None and bound > best[0] * (1 + 1e-12):
            break
        p = solver.solve(Kn, B, hint)
        if p is None:
            continue
        key = (energy(int(p.K0), Kn, B), tuple(p.K), p.B)
        if best is None or key[0] < best[0] * (1 - 1e-12) or (
                key[0] <= best[0] * (1 + 1e-12) and key[1:] < best[1:3]):
            best = (key[0], key[1], key[2], p)
    if best is None:
        raise RoundingFailed(f"no feasible integer point near the relaxed solution "
                             f"(K0={x['K0']:.6g}, B={x['B']:.6g})")
    return best[3]
