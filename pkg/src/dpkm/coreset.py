"""Private coresets: weighted center sets whose cost approximates the full
dataset's for every choice of k centers, plus an empirical quality checker.

Both constructions follow the same recipe: run the private k-means pipeline,
then spend a reserved budget slice re-estimating how many points each final
center serves, and return the centers with those weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .budget import BudgetLedger
from .candidates import DiscoveryKnobs, PeelSchedule, private_k_means_candidates
from .core import (CenterSet, Dataset, WeightedDataset, assign_labels, cost,
                   kmeanspp_lloyd, opt_over_candidates, sq_dists, weighted_cost)
from .ldp import LdpKnobs, LdpTranscript, ldp_k_means_detailed, weight_estimation_round
from .mechanisms import laplace_noise_vector
from .selection import private_local_search

WEIGHT_HISTOGRAM_SENSITIVITY = 2.0  # replacement moves a point between cells


@dataclass
class Coreset:
    weighted: WeightedDataset
    transcript: LdpTranscript | None = None

    @property
    def size(self) -> int:
        return self.weighted.n


def ldp_coreset(clients: np.ndarray, k: int, epsilon: float, beta: float,
                a: float, b: float, rng: np.random.Generator, lam: float,
                knobs: LdpKnobs = LdpKnobs(),
                ledger: BudgetLedger | None = None) -> Coreset:
    """Local-model coreset: run the k-means protocol on half the budget,
    then one extra weight-estimation round over the returned centers on the
    other half.  Adds exactly one round to the protocol."""
    transcript = LdpTranscript()
    res = ldp_k_means_detailed(clients, k, epsilon / 2.0, beta, a, b, rng, lam,
                               knobs=knobs, ledger=ledger, transcript=transcript)
    weights = weight_estimation_round(np.asarray(clients, dtype=float),
                                      res.centers.centers, epsilon / 2.0, beta,
                                      "coreset/weights", rng, transcript, ledger,
                                      z_mode=knobs.z_mode)
    return Coreset(WeightedDataset(res.centers.centers, weights, lam), transcript)


def centralized_coreset(S: Dataset, k: int, epsilon: float, delta: float,
                        beta: float, rng: np.random.Generator,
                        discovery_knobs: DiscoveryKnobs = DiscoveryKnobs(),
                        ledger: BudgetLedger | None = None,
                        eps_fractions: tuple[float, float, float] = (0.4, 0.4, 0.2),
                        schedule: PeelSchedule | None = None) -> Coreset:
    """Centralized coreset: candidate discovery, private swap selection, then
    Laplace-noised counts of the nearest-center assignment as weights.

    eps_fractions splits epsilon between the three stages; delta is split
    evenly between the two stages that consume it.
    """
    f_cand, f_sel, f_w = eps_fractions
    if not math.isclose(f_cand + f_sel + f_w, 1.0, rel_tol=1e-9):
        raise ValueError("eps_fractions must sum to 1")
    eps_cand, eps_sel, eps_w = (epsilon * f for f in (f_cand, f_sel, f_w))
    if schedule is None:
        schedule = PeelSchedule(n=S.n, d=S.d, k=k, beta=beta, epsilon=eps_cand,
                                delta=delta / 2.0, a=0.2, b=0.1)
    Y = private_k_means_candidates(S, k, beta, eps_cand, delta / 2.0, schedule,
                                   rng, ledger=ledger, knobs=discovery_knobs)
    if Y.size < k:
        raise ValueError(
            f"candidate discovery produced {Y.size} centers, need >= k={k}")
    centers = private_local_search(S, Y, k, eps_sel, delta / 2.0, beta, S.lam,
                                   rng, ledger=ledger)
    weights = noisy_assignment_weights(S, centers, eps_w, rng, ledger=ledger)
    return Coreset(WeightedDataset(centers.centers, weights, S.lam))


def noisy_assignment_weights(S: Dataset, centers: CenterSet, epsilon: float,
                             rng: np.random.Generator,
                             ledger: BudgetLedger | None = None) -> np.ndarray:
    """Laplace-noised histogram of nearest-center assignments.

    Each point lands in exactly one cell; replacement moves one point
    between two cells, so the count vector has L1 sensitivity 2.  Passing
    epsilon = inf returns the exact counts (test mode).
    """
    labels = assign_labels(S.points, centers)
    counts = np.bincount(labels, minlength=centers.k).astype(float)
    if math.isinf(epsilon):
        if ledger is not None:
            ledger.charge("coreset/weights", 0.0, 0.0, rule="basic",
                          detail="exact counts (test mode)")
        return counts
    noisy = laplace_noise_vector(counts, WEIGHT_HISTOGRAM_SENSITIVITY, epsilon, rng)
    if ledger is not None:
        ledger.charge("coreset/weights", epsilon, 0.0, rule="basic",
                      detail=f"{centers.k} assignment counts")
    return noisy


@dataclass(frozen=True)
class CoresetCheckResult:
    """Empirical quality envelope over sampled center sets.

    This is a sampled check over random plus adversarial center sets, not a
    proof over all of R^d.  gamma/eta are the fitted envelope; eta_at is the
    additive gap at a few fixed multiplicative levels, which is the stable
    quantity to trend against n.
    """

    gamma: float
    eta: float
    eta_at: dict
    trials: int
    note: str = "sampled envelope over random and adversarial center sets, not a proof"


def _envelope_eta(cost_s: np.ndarray, cost_p: np.ndarray, gamma: float) -> float:
    gap1 = np.max(cost_p - gamma * cost_s)
    gap2 = np.max(cost_s - gamma * cost_p)
    return float(max(0.0, gap1, gap2))


def fit_envelope(cost_s: np.ndarray, cost_p: np.ndarray) -> tuple[float, float]:
    """Smallest gamma >= 1 achieving the minimal additive gap over the
    sampled pairs; both inequality directions are enforced."""
    cost_s = np.asarray(cost_s, dtype=float)
    cost_p = np.asarray(cost_p, dtype=float)
    cands = {1.0}
    for s, p in zip(cost_s, cost_p):
        if s > 0:
            cands.add(max(1.0, p / s))
        if p > 0:
            cands.add(max(1.0, s / p))
    grid = sorted(cands)
    etas = [_envelope_eta(cost_s, cost_p, g) for g in grid]
    eta_min = min(etas)
    tol = 1e-9 * max(1.0, eta_min)
    for g, e in zip(grid, etas):
        if e <= eta_min + tol:
            return float(g), float(e)
    return float(grid[-1]), float(etas[-1])


def coreset_check(S: Dataset, P: Coreset | WeightedDataset, trials: int,
                  rng: np.random.Generator, k: int | None = None) -> CoresetCheckResult:
    """Measure the (gamma, eta) envelope over sampled center sets.

    Center sets tried: uniform draws from the ball, k-subsets of the
    coreset's own points, the non-private baseline's centers, and exact
    optima of small enumerable subsamples.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    W = P.weighted if isinstance(P, Coreset) else P
    if k is None:
        k = min(W.n, 3)
    d = S.d
    center_sets = []
    for _ in range(trials):
        raw = rng.standard_normal((k, d))
        radii = S.lam * rng.uniform(0, 1, size=k) ** (1.0 / d)
        norms = np.linalg.norm(raw, axis=1)
        norms[norms == 0] = 1.0
        center_sets.append(raw / norms[:, None] * radii[:, None])
    for _ in range(min(trials, 8)):
        take = rng.choice(W.n, size=min(k, W.n), replace=False)
        center_sets.append(W.points[take])
    center_sets.append(kmeanspp_lloyd(S, k, rng).centers)
    if S.n >= 4:
        sub = rng.choice(S.n, size=min(10, S.n), replace=False)
        best, _ = opt_over_candidates(S, S.points[sub], min(k, 4, len(sub)))
        center_sets.append(best.centers)

    cost_s = np.array([cost(S, CenterSet(c)) for c in center_sets])
    cost_p = np.array([weighted_cost(W, CenterSet(c)) for c in center_sets])
    gamma, eta = fit_envelope(cost_s, cost_p)
    eta_at = {g: _envelope_eta(cost_s, cost_p, g) for g in (3.0, 9.0, 27.0)}
    return CoresetCheckResult(gamma=gamma, eta=eta, eta_at=eta_at,
                              trials=len(center_sets))
