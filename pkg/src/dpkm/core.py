"""Geometric primitives: datasets, center sets, k-means cost, and the
non-private baseline plus brute-force oracles used by tests.

All operations are pure functions over immutable inputs.  Tie-breaking is
"lowest index wins" everywhere, which keeps every routine deterministic for a
fixed seed.  Randomness enters only through an explicitly passed generator.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

OPT_ENUM_MAX_CANDIDATES = 20
OPT_ENUM_MAX_K = 4


def _as_points(arr) -> np.ndarray:
    pts = np.asarray(arr, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    if pts.ndim != 2:
        raise ValueError(f"expected a 2-d point array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must have finite coordinates")
    return pts


@dataclass(frozen=True)
class Dataset:
    """n points in R^d, with the ball radius bound recorded as lam.

    Norms are validated at ingestion time (see harness.ingest), not here,
    so intermediate subsets can be built without re-checking.
    """

    points: np.ndarray
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "points", _as_points(self.points))
        if self.n < 1:
            raise ValueError("dataset must contain at least one point")
        if not (self.lam > 0):
            raise ValueError("lam must be positive")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.points[np.asarray(idx)], self.lam)


@dataclass(frozen=True)
class WeightedDataset:
    """Weighted points. Weights may be negative (debiased frequency
    estimates can undershoot), so no sign check is performed."""

    points: np.ndarray
    weights: np.ndarray
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "points", _as_points(self.points))
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != self.points.shape[0]:
            raise ValueError("one weight per point required")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "weights", w)
        if not (self.lam > 0):
            raise ValueError("lam must be positive")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class CenterSet:
    """A nonempty ordered list of centers."""

    centers: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "centers", _as_points(self.centers))
        if self.k == 0:
            raise ValueError("center set must be nonempty")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]


def _points_of(obj) -> np.ndarray:
    if isinstance(obj, (Dataset, WeightedDataset)):
        return obj.points
    if hasattr(obj, "centers"):
        return _as_points(obj.centers)
    return _as_points(obj)


def sq_dists(X, C) -> np.ndarray:
    """Pairwise squared euclidean distances, shape (len(X), len(C))."""
    X = _points_of(X)
    C = _points_of(C)
    if X.shape[1] != C.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {C.shape[1]}")
    return cdist(X, C, metric="sqeuclidean")


def cost(S: Dataset, C: CenterSet) -> float:
    """Sum over points of squared distance to the nearest center."""
    return float(sq_dists(S, C).min(axis=1).sum())


def weighted_cost(B: WeightedDataset, C: CenterSet) -> float:
    """Weighted cost. May be negative when weights are negative."""
    d2 = sq_dists(B.points, C).min(axis=1)
    return float(np.dot(B.weights, d2))


def nearest(x, C: CenterSet) -> tuple[int, np.ndarray]:
    """Index and coordinates of the nearest center; ties go to the lowest index."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    d2 = sq_dists(x, C)[0]
    idx = int(np.argmin(d2))  # argmin returns the first minimum
    return idx, _points_of(C)[idx].copy()


def assign_labels(S, C) -> np.ndarray:
    """Nearest-center index per point, lowest index on ties."""
    return np.argmin(sq_dists(S, C), axis=1)


def opt_over_candidates(S: Dataset, Y, k: int) -> tuple[CenterSet, float]:
    """Exhaustive minimum cost over all k-subsets of the candidate list Y.

    Test oracle only; refuses inputs beyond the enumeration guard to avoid
    accidental exponential blowups.
    """
    Ypts = _points_of(Y)
    m = Ypts.shape[0]
    if m > OPT_ENUM_MAX_CANDIDATES or k > OPT_ENUM_MAX_K:
        raise ValueError(
            f"enumeration guard: need |Y| <= {OPT_ENUM_MAX_CANDIDATES} and "
            f"k <= {OPT_ENUM_MAX_K}, got |Y|={m}, k={k}")
    if k < 1 or k > m:
        raise ValueError(f"k must be in [1, |Y|], got k={k}, |Y|={m}")
    d2 = sq_dists(S, Ypts)
    best_cost = math.inf
    best_combo = None
    for combo in itertools.combinations(range(m), k):
        c = float(d2[:, combo].min(axis=1).sum())
        if c < best_cost:
            best_cost = c
            best_combo = combo
    return CenterSet(Ypts[list(best_combo)]), best_cost


def kmeanspp_seed(S: Dataset, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-sampling seeding: first center uniform, then proportional to the
    squared distance to the nearest chosen center."""
    pts = S.points
    n = pts.shape[0]
    centers = np.empty((k, S.d))
    centers[0] = pts[rng.integers(n)]
    closest = cdist(pts, centers[:1], "sqeuclidean")[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[j] = pts[idx]
        d_new = cdist(pts, centers[j:j + 1], "sqeuclidean")[:, 0]
        np.minimum(closest, d_new, out=closest)
    return centers


def kmeanspp_lloyd(S: Dataset, k: int, rng: np.random.Generator,
                   max_iter: int = 100, rel_tol: float = 1e-9) -> CenterSet:
    """Non-private baseline: k-means++ seeding followed by Lloyd iterations.

    Stops at the iteration cap or when the relative cost improvement drops
    below rel_tol. Empty clusters keep their previous center.
    """
    if k > S.n:
        raise ValueError(f"k={k} exceeds n={S.n}")
    pts = S.points
    centers = kmeanspp_seed(S, k, rng)
    prev_cost = math.inf
    for _ in range(max_iter):
        d2 = cdist(pts, centers, "sqeuclidean")
        labels = np.argmin(d2, axis=1)
        cur = float(d2[np.arange(S.n), labels].sum())
        for j in range(k):
            mask = labels == j
            if mask.any():
                centers[j] = pts[mask].mean(axis=0)
        if prev_cost - cur <= rel_tol * max(prev_cost, 1e-300):
            break
        prev_cost = cur
    return CenterSet(centers)


@dataclass(frozen=True)
class CandidateProvenance:
    """Audit record for one discovered candidate center."""

    iteration: int
    radius: float
    partition: int
    bucket: int
    noisy_count: float


@dataclass
class CandidateSet:
    """Ordered candidate centers with per-center provenance."""

    centers: np.ndarray
    provenance: list[CandidateProvenance] = field(default_factory=list)

    def __post_init__(self):
        self.centers = (np.empty((0, 0)) if np.size(self.centers) == 0
                        else _as_points(self.centers))

    @property
    def size(self) -> int:
        return 0 if self.centers.size == 0 else self.centers.shape[0]

    def extend(self, other: "CandidateSet") -> "CandidateSet":
        if self.size == 0:
            return CandidateSet(other.centers.copy(), list(other.provenance))
        if other.size == 0:
            return CandidateSet(self.centers.copy(), list(self.provenance))
        return CandidateSet(np.vstack([self.centers, other.centers]),
                            list(self.provenance) + list(other.provenance))

    def as_center_set(self) -> CenterSet:
        return CenterSet(self.centers)
