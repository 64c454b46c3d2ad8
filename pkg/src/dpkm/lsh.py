"""Euclidean locality-sensitive hashing via random projections, concatenated
to hit a target far-collision rate, with universe reduction to [n^3].

The base hash is h(x) = floor((g.x + u)/w) with g a standard normal
direction, u uniform in [0, w), and w = 4r.  Its collision probability at
distance s has the closed form

    p(s) = 1 - 2*Phi(-w/s) - (2s / (sqrt(2*pi)*w)) * (1 - exp(-w^2 / (2 s^2)))

which is 1 at s=0 and strictly decreasing.  Concatenating t independent base
hashes raises both sides to the t-th power.

Parameter derivation is exact on the far side: the separation factor c is
the smallest value whose collision-exponent ratio supports the requested
near exponent, and t is then the smallest concatenation length with
p(c r)^t <= n^(-2-a).  The achieved near-collision rate p(r)^t can fall
below n^(-b) by at most one factor of p(r) (the integer-length
quantization); the achieved exponent is recorded in the params.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

MERSENNE61 = (1 << 61) - 1
WIDTH_FACTOR = 4.0
_C_SEARCH_MAX = 1e9


def base_collision_prob(dist: float, width: float) -> float:
    """Collision probability of one projection hash at the given distance."""
    if dist < 0 or width <= 0:
        raise ValueError("need dist >= 0 and width > 0")
    if dist == 0.0:
        return 1.0
    t = width / dist
    return float(1.0 - 2.0 * norm.cdf(-t)
                 - (2.0 / (math.sqrt(2.0 * math.pi) * t))
                 * (1.0 - math.exp(-t * t / 2.0)))


def _smallest_c(predicate, lo: float = 1.0, hi: float = _C_SEARCH_MAX,
                iters: int = 200) -> float:
    """Bisect for the smallest c in (lo, hi] satisfying a monotone predicate."""
    if not predicate(hi):
        raise ValueError(
            "no separation factor c below the search cap satisfies the "
            "requested (a, b); pick a larger b or a smaller a")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if predicate(mid):
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class LshParams:
    """Requested and achieved parameters of one concatenated hash family.

    Requested: near collisions at distance r should occur with probability
    at least n^(-b); collisions beyond distance c*r at most n^(-2-a).
    Achieved: q_bound holds exactly by construction; p_achieved and b_eff
    record the realized near side, and c the realized separation factor.
    """

    r: float
    a: float
    b: float
    n: int
    dim: int
    width: float
    t_cat: int
    c: float
    p_base: float
    q_base: float
    p_achieved: float
    b_eff: float

    @property
    def q_bound(self) -> float:
        return float(self.n) ** (-(2.0 + self.a))

    @property
    def p_requested(self) -> float:
        return float(self.n) ** (-self.b)

    @property
    def universe(self) -> int:
        return self.n ** 3

    @classmethod
    def derive(cls, r: float, a: float, b: float, n: int, dim: int) -> "LshParams":
        if not (0.0 < b < a < 1.0):
            raise ValueError(f"need 0 < b < a < 1, got a={a}, b={b}")
        if n < 2:
            raise ValueError("n must be >= 2")
        if not (r > 0):
            raise ValueError("r must be positive")
        if dim < 1:
            raise ValueError("dim must be >= 1")
        width = WIDTH_FACTOR * r
        p1 = base_collision_prob(r, width)
        ln_n = math.log(n)
        # Anchor c where one base hash trades near for far collisions at the
        # requested exponent ratio b/(2+a).
        ratio = b / (2.0 + a)
        need = math.log(1.0 / p1) / ratio

        def far_enough(cc: float) -> bool:
            q = base_collision_prob(cc * r, width)
            return q < 1.0 and math.log(1.0 / q) >= need

        c_anchor = _smallest_c(far_enough)
        q1 = base_collision_prob(c_anchor * r, width)
        t_cat = max(1, math.ceil((2.0 + a) * ln_n / math.log(1.0 / q1)))
        # The ceil can only shorten the near side by one base-hash factor.
        p_ach = p1 ** t_cat
        if p_ach < (float(n) ** (-b)) * p1 * (1.0 - 1e-9):
            raise ValueError(
                f"infeasible (a={a}, b={b}, n={n}): concatenation length "
                f"{t_cat} drives the near-collision rate to {p_ach:.3g}, "
                f"below the feasible floor n^(-b) * p_base = "
                f"{(float(n) ** (-b)) * p1:.3g}; decrease a or increase b")
        q_target = float(n) ** (-(2.0 + a))

        def achieves_far(cc: float) -> bool:
            return base_collision_prob(cc * r, width) ** t_cat <= q_target

        c_achieved = _smallest_c(achieves_far)
        b_eff = -math.log(p_ach) / ln_n
        return cls(r=r, a=a, b=b, n=n, dim=dim, width=width, t_cat=t_cat,
                   c=c_achieved, p_base=p1,
                   q_base=base_collision_prob(c_achieved * r, width),
                   p_achieved=p_ach, b_eff=b_eff)


@dataclass(frozen=True)
class LshFunction:
    """One sampled concatenated hash with its universe-reduction map.

    Evaluation is deterministic given the stored randomness: projections G,
    offsets, and the multiply-shift coefficients over the 61-bit Mersenne
    prime that reduce the concatenated tuple into [universe].
    """

    params: LshParams
    projections: np.ndarray  # (t_cat, dim)
    offsets: np.ndarray      # (t_cat,)
    mul: int
    add: int
    universe: int

    def base_cells(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        if single:
            X = X.reshape(1, -1)
        if X.shape[1] != self.params.dim:
            raise ValueError(
                f"dimension mismatch: function is over R^{self.params.dim}, "
                f"points have dim {X.shape[1]}")
        proj = X @ self.projections.T + self.offsets
        cells = np.floor(proj / self.params.width).astype(np.int64)
        return cells[0] if single else cells


def sample_lsh(params: LshParams, rng: np.random.Generator,
               universe: int | None = None) -> LshFunction:
    """Sample one hash function. universe overrides the default n^3 range
    (the local-model protocol uses a smaller report domain)."""
    G = rng.standard_normal((params.t_cat, params.dim))
    offsets = rng.uniform(0.0, params.width, size=params.t_cat)
    mul = int(rng.integers(1, MERSENNE61))
    add = int(rng.integers(0, MERSENNE61))
    return LshFunction(params=params, projections=G, offsets=offsets,
                       mul=mul, add=add,
                       universe=params.universe if universe is None else int(universe))


def _reduce_cells(f: LshFunction, cells: np.ndarray) -> int:
    digest = hashlib.blake2b(cells.astype("<i8").tobytes(), digest_size=16).digest()
    x = int.from_bytes(digest, "little") % MERSENNE61
    return ((f.mul * x + f.add) % MERSENNE61) % f.universe


def bucket(f: LshFunction, x) -> int:
    """Deterministic bucket id of one point in [universe]."""
    return _reduce_cells(f, f.base_cells(x))


def bucket_many(f: LshFunction, X) -> np.ndarray:
    """Bucket ids for a batch of points."""
    cells = f.base_cells(np.asarray(X, dtype=float))
    return np.fromiter((_reduce_cells(f, row) for row in cells),
                       dtype=np.int64, count=cells.shape[0])


def wilson_interval(successes: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    phat = successes / trials
    z2 = z * z
    denom = 1.0 + z2 / trials
    center = (phat + z2 / (2 * trials)) / denom
    half = (z * math.sqrt(phat * (1 - phat) / trials + z2 / (4 * trials * trials))) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass(frozen=True)
class CollisionEstimate:
    probability: float
    ci_low: float
    ci_high: float
    trials: int

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2.0


def collision_probability_estimate(params: LshParams, distance: float,
                                   trials: int, rng: np.random.Generator) -> CollisionEstimate:
    """Monte-Carlo collision frequency of a fixed pair at the given distance,
    over freshly sampled hash functions, with a Wilson interval.

    Runs the full pipeline including universe reduction, so reduction
    collisions of far pairs are measured rather than assumed.
    """
    if trials < 1000:
        raise ValueError("need at least 1000 trials for a meaningful interval")
    if distance < 0:
        raise ValueError("distance must be >= 0")
    x = np.zeros(params.dim)
    y = np.zeros(params.dim)
    y[0] = distance
    hits = 0
    for _ in range(trials):
        f = sample_lsh(params, rng)
        cx = f.base_cells(x)
        if distance == 0.0:
            hits += 1
            continue
        cy = f.base_cells(y)
        if np.array_equal(cx, cy):
            hits += 1
        elif _reduce_cells(f, cx) == _reduce_cells(f, cy):
            hits += 1
    lo, hi = wilson_interval(hits, trials)
    return CollisionEstimate(hits / trials, lo, hi, trials)
