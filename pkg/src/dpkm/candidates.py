"""Centralized private candidate-center discovery.

Three layers: a single-radius pass that partitions the data, hashes each
partition, releases a noisy histogram of bucket sizes, and privately
averages every heavy bucket; a radius sweep that repeats the pass over
exponentially growing radii; and an outer peeling loop that repeatedly
removes the points best served by the candidates found so far, exposing
smaller clusters.

Log conventions: thresholds use natural log, iteration and loop counts use
base-2 logs rounded up with a floor of 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .budget import BudgetLedger
from .core import CandidateProvenance, CandidateSet, Dataset, sq_dists
from .lsh import LshParams, bucket_many, sample_lsh
from .mechanisms import noisy_average

logger = logging.getLogger(__name__)

HEAVY_BUCKET_CONST = 60.0  # threshold multiplier on (1/eps) ln(n/beta)
HISTOGRAM_SENSITIVITY = 2.0  # replacement moves one point between buckets


def log2_ceil(x: float) -> int:
    return max(1, math.ceil(math.log2(x)))


@dataclass(frozen=True)
class DiscoveryKnobs:
    """Desk-scale tuning of the discovery pipeline.

    Defaults reproduce the analyzed constants.  The overrides trade the
    asymptotic guarantees for signal at small n; they never touch the
    privacy accounting, which always divides the budget by the actual number
    of sub-releases.
    """

    threshold_factor: float = 1.0     # scales the heavy-bucket threshold
    partition_override: int | None = None  # fixes the partition count M
    min_radius_factor: float = 0.0    # drops radii below factor * lam
    max_radius_factor: float = 1.0    # drops radii above factor * lam
    iterations_override: int | None = None  # fixes the peeling iteration count
    candidate_cap_override: int | None = None  # fixes the per-pass output cap
    na_mode: str = "laplace"          # noisy-average averaging mode
    bucket_diam_factor: float | None = None  # diameter bound per bucket, in units of r


def heavy_bucket_threshold(epsilon: float, n: int, beta: float,
                           factor: float = 1.0) -> float:
    return factor * (HEAVY_BUCKET_CONST / epsilon) * math.log(n / beta)


def partition_count(n: int, a: float, beta: float) -> int:
    return max(1, math.ceil(2.0 * n ** a * math.log(1.0 / beta)))


def lsh_procedure(S: Dataset, r: float, beta: float, epsilon: float, delta: float,
                  a: float, b: float, rng: np.random.Generator,
                  ledger: BudgetLedger | None = None,
                  knobs: DiscoveryKnobs = DiscoveryKnobs(),
                  iteration: int = 0) -> CandidateSet:
    """Single-radius heavy-bucket discovery.

    The data is split uniformly at random into M parts, each hashed by its
    own sampled function.  A point lands in exactly one (partition, bucket)
    cell, so one Laplace histogram over all cells costs epsilon/2, and the
    noisy averages of the surviving buckets run on disjoint data and cost
    (epsilon/2, delta) together.  Output is capped by dropping the
    lowest-noisy-count buckets first.
    """
    n = S.n
    if n < 2:
        raise ValueError("need at least 2 points")
    if not (0 < beta < 1):
        raise ValueError("beta must be in (0, 1)")
    M = knobs.partition_override or partition_count(n, a, beta)
    params = LshParams.derive(r, a, b, n, S.d)
    assignment = rng.integers(0, M, size=n)
    part_rngs = rng.spawn(M)

    hist_eps = epsilon / 2.0
    hist_scale = HISTOGRAM_SENSITIVITY / hist_eps
    threshold = heavy_bucket_threshold(epsilon, n, beta, knobs.threshold_factor)

    kept: list[tuple[float, int, int, np.ndarray]] = []
    for m in range(M):
        idx = np.flatnonzero(assignment == m)
        if idx.size == 0:
            continue
        f = sample_lsh(params, part_rngs[m])
        ids = bucket_many(f, S.points[idx])
        order = np.argsort(ids, kind="stable")
        ids_sorted = ids[order]
        idx_sorted = idx[order]
        uniq, starts = np.unique(ids_sorted, return_index=True)
        bounds = np.append(starts, ids_sorted.size)
        noisy = (bounds[1:] - bounds[:-1]) + part_rngs[m].laplace(
            scale=hist_scale, size=uniq.size)
        for u_pos in np.flatnonzero(noisy >= threshold):
            members = idx_sorted[bounds[u_pos]:bounds[u_pos + 1]]
            kept.append((float(noisy[u_pos]), m, int(uniq[u_pos]), members))

    if ledger is not None:
        ledger.charge("lsh_procedure/histogram", hist_eps, 0.0, rule="parallel",
                      detail=f"one histogram per partition, M={M}, scale={hist_scale:.3g}")
        ledger.charge("lsh_procedure/averages", epsilon / 2.0, delta, rule="parallel",
                      detail=f"{len(kept)} disjoint heavy buckets")

    cap = knobs.candidate_cap_override
    if cap is None:
        cap = max(0, math.floor(epsilon * n / math.log2(n))) if n > 1 else 0
    kept.sort(key=lambda t: (-t[0], t[1], t[2]))
    kept = kept[:cap]

    # Every subset of the data has diameter at most 2*lam, so the tighter of
    # c*r and 2*lam is always a valid bound; the knob can tighten it further.
    if knobs.bucket_diam_factor is not None:
        diam_bound = knobs.bucket_diam_factor * r
    else:
        diam_bound = min(params.c * r, 2.0 * S.lam)
    centers = []
    provenance = []
    avg_rngs = rng.spawn(len(kept))
    for (noisy_count, m, u, members), sub_rng in zip(kept, avg_rngs):
        y, _ = noisy_average(S.points[members], diam_bound, epsilon / 2.0,
                             delta, beta, sub_rng, mode=knobs.na_mode)
        centers.append(y)
        provenance.append(CandidateProvenance(iteration=iteration, radius=r,
                                              partition=m, bucket=u,
                                              noisy_count=noisy_count))
    if not centers:
        return CandidateSet(np.empty((0, S.d)))
    # Candidate centers are public once released; projecting them back into
    # the ball is post-processing and keeps downstream score bounds valid.
    arr = np.asarray(centers)
    norms = np.linalg.norm(arr, axis=1)
    over = norms > S.lam
    if over.any():
        arr[over] *= (S.lam / norms[over])[:, None]
    return CandidateSet(arr, provenance)


def radius_schedule(n: int, lam: float, min_radius_factor: float = 0.0,
                    max_radius_factor: float = 1.0) -> list[float]:
    """Exponential radius sweep lam/n, 2 lam/n, ..., up to lam."""
    count = math.floor(math.log2(n)) + 1
    radii = [(2 ** i) * lam / n for i in range(count)]
    if min_radius_factor > 0.0:
        radii = [r for r in radii if r >= min_radius_factor * lam]
    if max_radius_factor < 1.0:
        kept = [r for r in radii if r <= max_radius_factor * lam]
        radii = kept or radii[:1]
    if not radii:
        radii = [lam]
    return radii


def private_centers(S: Dataset, beta: float, epsilon: float, delta: float,
                    a: float, b: float, rng: np.random.Generator,
                    ledger: BudgetLedger | None = None,
                    knobs: DiscoveryKnobs = DiscoveryKnobs(),
                    iteration: int = 0) -> CandidateSet:
    """Radius sweep: one discovery pass per radius, each on budget
    (epsilon/L, delta/L) where L is the exact number of radii."""
    radii = radius_schedule(S.n, S.lam, knobs.min_radius_factor,
                            knobs.max_radius_factor)
    L = len(radii)
    out = CandidateSet(np.empty((0, S.d)))
    for r in radii:
        sub = lsh_procedure(S, r, beta, epsilon / L, delta / L, a, b, rng,
                            ledger=ledger, knobs=knobs, iteration=iteration)
        out = out.extend(sub)
    cap = math.floor(epsilon * S.n)
    if out.size > cap:
        order = sorted(range(out.size),
                       key=lambda i: (-out.provenance[i].noisy_count, i))[:cap]
        order.sort()
        out = CandidateSet(out.centers[order], [out.provenance[i] for i in order])
    return out


def peel_next_size(T: int, w: float, k: int, n_i: int, a_plus_b: float) -> int:
    """Target size of the next peeled subset: ceil(2 (T+1) w k n_i^(a+b))."""
    return math.ceil(2.0 * (T + 1) * w * k * n_i ** a_plus_b)


def peel(S_i: Dataset, C: CandidateSet | np.ndarray, m: int) -> Dataset:
    """The m points of S_i farthest from their nearest candidate center.

    Ties break toward the lowest original index, so the returned points
    always dominate the excluded ones in distance.
    """
    centers = C.centers if isinstance(C, CandidateSet) else np.asarray(C)
    if centers.size == 0:
        raise ValueError("candidate set must be nonempty")
    if m > S_i.n:
        raise ValueError(f"cannot peel {m} points from {S_i.n}")
    d2 = sq_dists(S_i.points, centers).min(axis=1)
    order = np.lexsort((np.arange(S_i.n), -d2))
    return S_i.subset(order[:m])


@dataclass(frozen=True)
class PeelSchedule:
    """Shrinkage schedule of the peeling loop.

    w follows the analyzed form with all logs base 2 and the inner sqrt
    argument floored at 1 (it can drop below 1 at desk scale, where the
    asymptotic formula is not meaningful).
    """

    n: int
    d: int
    k: int
    beta: float
    epsilon: float
    delta: float
    a: float
    b: float
    gamma_const: float = 1.0
    T: int | None = None

    def __post_init__(self):
        if not (self.delta > 0):
            raise ValueError("the schedule requires delta > 0")
        if self.T is None:
            object.__setattr__(self, "T", max(3, log2_ceil(max(2.0, math.log2(self.n)))))

    @property
    def loglog_n(self) -> float:
        return math.log2(max(2.0, math.log2(self.n)))

    @property
    def w(self) -> float:
        inner = max(1.0, math.log2(max(1e-300, self.loglog_n / self.delta)))
        return (self.gamma_const * math.sqrt(self.d) / self.epsilon
                * self.loglog_n * math.log2(self.k / self.beta)
                * math.sqrt(inner))

    def next_size(self, n_i: int) -> int:
        return peel_next_size(self.T, self.w, self.k, n_i, self.a + self.b)

    @property
    def iterations(self) -> int:
        return log2_ceil(max(2.0, math.log2(self.n)))

    def additive_floor(self, lam: float) -> float:
        """Shape of the unavoidable additive cost term: the residual unpeeled
        mass times the squared radius bound."""
        return (2.0 * (self.T + 1) * self.w * self.k) ** (1.0 / (1.0 - self.a - self.b)) * lam * lam


def private_k_means_candidates(S: Dataset, k: int, beta: float, epsilon: float,
                               delta: float, schedule: PeelSchedule,
                               rng: np.random.Generator,
                               ledger: BudgetLedger | None = None,
                               knobs: DiscoveryKnobs = DiscoveryKnobs()) -> CandidateSet:
    """Peeling loop: run the radius sweep, then drop all but the points
    farthest from the discovered centers, and repeat.

    Each iteration spends (epsilon/I, delta/I) with failure share beta/k,
    where I is the exact iteration count.  If the schedule stops shrinking
    (next size >= current size, which happens at desk scale) the loop stops
    early; candidates only accumulate, so stopping is always safe.
    """
    iterations = knobs.iterations_override or schedule.iterations
    C = CandidateSet(np.empty((0, S.d)))
    S_i = S
    ran = 0
    for i in range(iterations):
        sub = private_centers(S_i, beta / k, epsilon / iterations,
                              delta / iterations, schedule.a, schedule.b, rng,
                              ledger=ledger, knobs=knobs, iteration=i)
        C = C.extend(sub)
        ran += 1
        if i == iterations - 1:
            break
        n_next = schedule.next_size(S_i.n)
        if n_next >= S_i.n:
            logger.warning("peel schedule stopped early: next size %d >= %d",
                           n_next, S_i.n)
            break
        if n_next < 2 or C.size == 0:
            logger.warning("peel schedule stopped: too few points or no centers")
            break
        S_i = peel(S_i, C, n_next)
    if ledger is not None and ran < iterations:
        # Early termination spends less than the allocation; record the
        # remainder so the ledger always sums to the declared budget.
        unused = iterations - ran
        ledger.charge("private_k_means_candidates/unused-allocation",
                      unused * epsilon / iterations, unused * delta / iterations,
                      rule="reserved",
                      detail=f"{unused} of {iterations} peel iterations skipped")
    cap = math.floor(epsilon * S.n * max(0.0, math.log2(k / beta)))
    if C.size > cap:
        order = sorted(range(C.size),
                       key=lambda i: (-C.provenance[i].noisy_count, i))[:cap]
        order.sort()
        C = CandidateSet(C.centers[order], [C.provenance[i] for i in order])
    return C
