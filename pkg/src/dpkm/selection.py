"""Choosing k centers from a candidate set by swap-based local search.

Two variants share the swap machinery: a deterministic search against an
approximate cost oracle, and a private search whose swap at every step is
sampled by the exponential mechanism under an advanced-composition budget.

Swaps replace one current center with a candidate outside the current set;
keeping the current set (a no-op swap) is always available, so the set size
stays exactly k.  Ties go to the lexicographically smallest (outgoing
candidate index, incoming candidate index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .budget import BudgetLedger
from .core import CenterSet, Dataset, WeightedDataset, sq_dists

BRUTE_FORCE_MAX_N = 2000
BRUTE_FORCE_MAX_Y = 64


class CostOracle:
    """Evaluates the clustering cost of k-subsets of a fixed candidate list.

    slack bounds how far the oracle may sit from the true cost it stands in
    for: 0 for the exact oracle, positive for weighted estimates built from
    noisy weights.  A clip value caps each point's contribution, which
    bounds how much one replaced point can move the total.
    """

    def __init__(self, dist_matrix: np.ndarray, weights: np.ndarray,
                 slack: float, clip: float | None = None):
        self.dist_matrix = np.asarray(dist_matrix, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.slack = float(slack)
        self.clip = clip
        if self.slack < 0:
            raise ValueError("slack must be >= 0")

    @classmethod
    def exact(cls, S: Dataset, Y, clip: float | None = None) -> "CostOracle":
        Ypts = Y.centers if hasattr(Y, "centers") else np.asarray(Y)
        return cls(sq_dists(S.points, Ypts), np.ones(S.n), 0.0, clip=clip)

    @classmethod
    def weighted(cls, B: WeightedDataset, Y, slack: float) -> "CostOracle":
        Ypts = Y.centers if hasattr(Y, "centers") else np.asarray(Y)
        return cls(sq_dists(B.points, Ypts), B.weights, slack)

    @property
    def num_candidates(self) -> int:
        return self.dist_matrix.shape[1]

    def _clipped(self, arr: np.ndarray) -> np.ndarray:
        return arr if self.clip is None else np.minimum(arr, self.clip)

    def __call__(self, indices) -> float:
        cols = self.dist_matrix[:, list(indices)]
        return float(np.dot(self.weights, self._clipped(cols.min(axis=1))))

    def swap_costs(self, current: list[int]) -> np.ndarray:
        """Cost of every single swap, shape (k, num_candidates).

        Entry (j, y) is the cost of current with its j-th member replaced by
        candidate y.  Column y == current[j] reproduces the current cost;
        columns for other current members are +inf (they would shrink the
        set and are not legal swaps).
        """
        k = len(current)
        dcur = self.dist_matrix[:, current]
        if k == 1:
            base = np.zeros((1, dcur.shape[0]))
            base[0] = np.inf
        else:
            order = np.argsort(dcur, axis=1)
            rows = np.arange(dcur.shape[0])
            d1 = dcur[rows, order[:, 0]]
            d2 = dcur[rows, order[:, 1]]
            base = np.empty((k, dcur.shape[0]))
            for j in range(k):
                base[j] = np.where(order[:, 0] == j, d2, d1)
        out = np.empty((k, self.num_candidates))
        for j in range(k):
            mins = self._clipped(np.minimum(base[j][:, None], self.dist_matrix))
            out[j] = self.weights @ mins
        members = set(current)
        for j, cj in enumerate(current):
            for other in members:
                if other != cj:
                    out[j, other] = np.inf
        return out


@dataclass(frozen=True)
class SwapStep:
    outgoing: int
    incoming: int
    score: float  # negated cost after the swap


def search_iterations(k: int, n: int) -> int:
    return math.ceil(2.0 * k * math.log2(max(2, n)))


def _argmax_lexicographic(values: np.ndarray, current: list[int]) -> tuple[int, int]:
    """Flat argmax with ties by (outgoing candidate index, incoming index).

    current is kept sorted ascending, so row-major argmax is already
    lexicographic in the candidate identities.
    """
    flat = int(np.argmax(values))
    j, y = divmod(flat, values.shape[1])
    return j, y


def noisy_local_search(oracle: CostOracle, Y, k: int, n: int, lam: float,
                       return_trace: bool = False):
    """Deterministic swap search against the oracle.

    Runs exactly ceil(2 k log2 n) iterations, each taking the swap that
    maximizes the oracle improvement.  With an exact oracle (slack 0) a
    non-improving best swap is skipped, which makes the oracle cost
    non-increasing; with positive slack the maximizer is taken verbatim
    since the analysis tolerates bounded worsening.
    """
    Ypts = Y.centers if hasattr(Y, "centers") else np.asarray(Y)
    m = Ypts.shape[0]
    if m < k:
        raise ValueError(f"need at least k={k} candidates, got {m}")
    current = sorted(range(k))
    T = search_iterations(k, n)
    trace = [oracle(current)]
    for _ in range(T):
        after = oracle.swap_costs(current)
        j, y = _argmax_lexicographic(-after, current)
        improvement = trace[-1] - after[j, y]
        if oracle.slack == 0.0 and improvement <= 0.0:
            trace.append(trace[-1])
            continue
        nxt = sorted(current[:j] + current[j + 1:] + [y])
        current = nxt
        trace.append(oracle(current))
    result = CenterSet(Ypts[current])
    if return_trace:
        return result, trace
    return result


def private_local_search(S: Dataset, Y, k: int, epsilon: float, delta: float,
                         beta: float, lam: float, rng: np.random.Generator,
                         ledger: BudgetLedger | None = None) -> CenterSet:
    """Local search with every swap chosen by the exponential mechanism.

    Each of the T = ceil(2 k log2 n) steps samples a swap with probability
    proportional to exp(-eps_step * score / (2 * lam^2)), where
    eps_step = epsilon / (2 sqrt(2 T ln(1/delta))) so the steps compose to
    (epsilon, delta).  The score is the swap's cost with every point's
    contribution clipped at lam^2; clipping is what makes the score
    sensitivity exactly lam^2 (an unclipped squared distance inside the
    ball can reach (2 lam)^2).  Only the final set is released.
    """
    Ypts = Y.centers if hasattr(Y, "centers") else np.asarray(Y)
    m = Ypts.shape[0]
    if m < k:
        raise ValueError(f"need at least k={k} candidates, got {m}")
    if not (0 < delta < 1):
        raise ValueError("delta must be in (0, 1)")
    oracle = CostOracle.exact(S, Ypts, clip=lam * lam)
    T = search_iterations(k, S.n)
    eps_step = epsilon / (2.0 * math.sqrt(2.0 * T * math.log(1.0 / delta)))
    sensitivity = lam * lam
    current = sorted(range(k))
    for _ in range(T):
        after = oracle.swap_costs(current)
        logits = swap_log_probabilities(after, eps_step, sensitivity)
        probs = np.exp(logits).reshape(-1)
        probs /= probs.sum()
        flat = int(rng.choice(logits.size, p=probs))
        j, y = divmod(flat, after.shape[1])
        if y == current[j]:
            continue
        current = sorted(current[:j] + current[j + 1:] + [y])
    if ledger is not None:
        ledger.charge("private_local_search", epsilon, delta, rule="advanced",
                      detail=f"T={T} steps at eps_step={eps_step:.6g}")
    return CenterSet(Ypts[current])


def swap_log_probabilities(swap_costs: np.ndarray, eps_step: float,
                           sensitivity: float) -> np.ndarray:
    """Normalized log-probabilities of the exponential-mechanism sampler.

    Infinite costs (illegal swaps) get probability zero.
    """
    logits = np.where(np.isinf(swap_costs), -np.inf,
                      -eps_step * swap_costs / (2.0 * sensitivity))
    return logits - logsumexp(logits)


def best_swap_bruteforce(S: Dataset, Y, D) -> tuple[SwapStep, float]:
    """Exact best strict swap (incoming candidate outside the current set).

    Test oracle: improvement may be negative when the current set is already
    locally optimal.
    """
    Ypts = Y.centers if hasattr(Y, "centers") else np.asarray(Y)
    Didx = sorted(int(i) for i in D)
    if S.n > BRUTE_FORCE_MAX_N or Ypts.shape[0] > BRUTE_FORCE_MAX_Y:
        raise ValueError("instance too large for brute force")
    outside = [y for y in range(Ypts.shape[0]) if y not in set(Didx)]
    if not outside:
        raise ValueError("no strict swaps exist: candidate set equals the current set")
    oracle = CostOracle.exact(S, Ypts)
    base = oracle(Didx)
    best = None
    best_after = math.inf
    for x in Didx:
        rest = [i for i in Didx if i != x]
        for y in outside:
            after = oracle(rest + [y])
            if after < best_after - 1e-15 or best is None:
                best_after = after
                best = SwapStep(outgoing=x, incoming=y, score=-after)
    return best, base - best_after
