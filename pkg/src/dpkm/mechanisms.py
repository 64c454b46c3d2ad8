"""DP noise primitives: Laplace and Gaussian mechanisms, the bounded-diameter
noisy average, and the plus/minus-one randomized-response bit.

Neighboring databases are same-size databases differing in one entry
(replacement semantics), so a histogram over disjoint cells has L1
sensitivity 2: one cell loses a point and another gains one.  All internal
noise scales below follow that convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .budget import BudgetLedger


@dataclass(frozen=True)
class NoiseSpec:
    """Mechanism kind plus the calibrated noise parameter.

    kind is "laplace" (L1 sensitivity) or "gaussian" (L2 sensitivity). The
    gaussian spec requires epsilon and delta in (0, 1) and uses the smallest
    sigma admitted by the analytic bound.
    """

    kind: str
    sensitivity: float
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("laplace", "gaussian"):
            raise ValueError(f"unknown mechanism kind {self.kind!r}")
        if self.sensitivity < 0:
            raise ValueError("sensitivity must be >= 0")
        if self.kind == "laplace" and not (self.epsilon > 0):
            raise ValueError("laplace requires epsilon > 0")
        if self.kind == "gaussian":
            if not (0 < self.epsilon < 1):
                raise ValueError("gaussian requires epsilon in (0, 1)")
            if not (0 < self.delta < 1):
                raise ValueError("gaussian requires delta in (0, 1)")

    @property
    def norm(self) -> str:
        return "l1" if self.kind == "laplace" else "l2"

    @property
    def scale(self) -> float:
        """Laplace scale b, noise pdf (1/2b) exp(-|y|/b)."""
        if self.kind != "laplace":
            raise ValueError("scale is a laplace parameter")
        return self.sensitivity / self.epsilon

    @property
    def sigma(self) -> float:
        if self.kind != "gaussian":
            raise ValueError("sigma is a gaussian parameter")
        return gaussian_sigma(self.sensitivity, self.epsilon, self.delta)


def gaussian_sigma(l2_sensitivity: float, epsilon: float, delta: float) -> float:
    """Smallest sigma for (epsilon, delta)-DP: (s/eps) * sqrt(2 ln(1.25/delta))."""
    return (l2_sensitivity / epsilon) * math.sqrt(2.0 * math.log(1.25 / delta))


def laplace_noise_vector(value, l1_sensitivity: float, epsilon: float,
                         rng: np.random.Generator) -> np.ndarray:
    """value + independent Lap(l1_sensitivity / epsilon) per coordinate."""
    if not (epsilon > 0):
        raise ValueError("epsilon must be > 0")
    if l1_sensitivity < 0:
        raise ValueError("sensitivity must be >= 0")
    value = np.asarray(value, dtype=float)
    if l1_sensitivity == 0.0:
        return value.copy()
    return value + rng.laplace(scale=l1_sensitivity / epsilon, size=value.shape)


def gaussian_noise_vector(value, l2_sensitivity: float, epsilon: float,
                          delta: float, rng: np.random.Generator) -> np.ndarray:
    """value + independent N(0, sigma^2) per coordinate at the smallest
    admissible sigma."""
    spec = NoiseSpec("gaussian", l2_sensitivity, epsilon, delta)
    value = np.asarray(value, dtype=float)
    if l2_sensitivity == 0.0:
        return value.copy()
    return value + rng.normal(scale=spec.sigma, size=value.shape)


def rr_probabilities(epsilon: float) -> tuple[float, float]:
    """(keep, flip) probabilities of the randomized-response bit.

    keep = e^eps / (e^eps + 1), flip = 1 / (e^eps + 1); their ratio is
    exactly e^eps, which is the whole privacy proof of the mechanism.
    """
    if not (epsilon > 0):
        raise ValueError("epsilon must be > 0")
    e = math.exp(epsilon)
    return e / (e + 1.0), 1.0 / (e + 1.0)


def randomized_response_bit(x: int, epsilon: float, rng: np.random.Generator) -> int:
    """Return x with probability e^eps/(e^eps+1), else -x. x must be +-1."""
    if x not in (-1, 1):
        raise ValueError(f"input bit must be -1 or +1, got {x}")
    keep, _ = rr_probabilities(epsilon)
    return x if rng.random() < keep else -x


def randomized_response_bits(bits: np.ndarray, epsilon: float,
                             rng: np.random.Generator) -> np.ndarray:
    """Vectorized randomized response over an array of +-1 bits."""
    bits = np.asarray(bits)
    if not np.isin(bits, (-1, 1)).all():
        raise ValueError("all input bits must be -1 or +1")
    keep, _ = rr_probabilities(epsilon)
    flip = rng.random(bits.shape) >= keep
    return np.where(flip, -bits, bits).astype(np.int8)


@dataclass(frozen=True)
class NoisyAverageInfo:
    """Internal constants of one noisy_average call, exposed so tests can
    assert the sensitivity accounting."""

    selection_epsilon: float
    averaging_epsilon: float
    per_coord_selection_epsilon: float
    per_coord_averaging_epsilon: float
    selection_noise_scale: float
    averaging_noise_scale: float
    clip_width: float
    selected_cells: np.ndarray
    low_confidence: bool


def noisy_average(points: np.ndarray, r: float, epsilon: float, delta: float,
                  beta: float, rng: np.random.Generator, mode: str = "laplace",
                  ledger: BudgetLedger | None = None,
                  label: str = "noisy_average") -> tuple[np.ndarray, NoisyAverageInfo]:
    """Private estimate of the mean of points whose diameter should be <= r.

    Works per coordinate: a grid of cells of width 2r with a uniform random
    offset is laid over the data; the heaviest cell is chosen by
    report-noisy-max over Laplace-noised cell counts; the coordinate values
    are clipped to the chosen cell widened by one cell on each side (total
    width 6r) and the clipped mean is released with noise.

    Budget: epsilon/2 for cell selection and epsilon/2 for averaging, each
    half divided evenly over the d coordinates under basic composition, so
    the call composes to exactly epsilon.  In "gaussian" mode the averaging
    half instead uses the Gaussian mechanism on the d-vector of clipped
    means (L2 sensitivity 6r*sqrt(d)/n), spending (epsilon/2, delta).

    Privacy holds regardless of the true diameter; only the accuracy
    contract is conditional on diam <= r.  The returned info carries every
    internal constant so the accounting can be asserted.
    """
    if not (r > 0):
        raise ValueError("r must be positive")
    if not (epsilon > 0):
        raise ValueError("epsilon must be > 0")
    if not (0 < beta < 1):
        raise ValueError("beta must be in (0, 1)")
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    n, d = pts.shape
    if n < 1:
        raise ValueError("points must be nonempty")
    if mode not in ("laplace", "gaussian"):
        raise ValueError(f"unknown mode {mode!r}")

    cell_width = 2.0 * r
    clip_width = 3.0 * cell_width  # selected cell plus one cell on each side
    eps_sel = epsilon / 2.0
    eps_avg = epsilon / 2.0
    eps_sel_coord = eps_sel / d
    eps_avg_coord = eps_avg / d
    # Report-noisy-max over per-cell counts; each count moves by at most 1
    # under replacement of one point, and two counts can move, hence scale 2.
    sel_scale = 2.0 / eps_sel_coord

    lows = np.empty(d)
    selected = np.empty(d, dtype=np.int64)
    clipped = np.empty_like(pts)
    confident = True
    confidence_floor = 2.0 * sel_scale * math.log(2.0 * d / beta)
    for j in range(d):
        offset = rng.uniform(0.0, cell_width)
        cells = np.floor((pts[:, j] + offset) / cell_width).astype(np.int64)
        uniq, counts = np.unique(cells, return_counts=True)
        noisy = counts + rng.laplace(scale=sel_scale, size=counts.shape)
        pick = int(np.argmax(noisy))
        selected[j] = uniq[pick]
        if noisy[pick] < confidence_floor:
            confident = False
        low = uniq[pick] * cell_width - offset - cell_width
        lows[j] = low
        clipped[:, j] = np.clip(pts[:, j], low, low + clip_width)

    mean = clipped.mean(axis=0)
    if mode == "laplace":
        avg_scale = clip_width / (n * eps_avg_coord)
        out = mean + rng.laplace(scale=avg_scale, size=d)
    else:
        avg_scale = gaussian_sigma(clip_width * math.sqrt(d) / n, eps_avg, delta)
        out = mean + rng.normal(scale=avg_scale, size=d)

    if ledger is not None:
        ledger.charge(f"{label}/cell-selection", eps_sel, 0.0, rule="basic",
                      detail=f"{d} coords at eps {eps_sel_coord:.3g} each")
        ledger.charge(f"{label}/averaging", eps_avg, delta, rule="basic",
                      detail=f"mode={mode}, clip width {clip_width:.3g}")

    info = NoisyAverageInfo(
        selection_epsilon=eps_sel,
        averaging_epsilon=eps_avg,
        per_coord_selection_epsilon=eps_sel_coord,
        per_coord_averaging_epsilon=eps_avg_coord,
        selection_noise_scale=sel_scale,
        averaging_noise_scale=avg_scale,
        clip_width=clip_width,
        selected_cells=selected,
        low_confidence=not confident,
    )
    return out, info
