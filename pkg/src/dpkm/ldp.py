"""The local model: client-side randomizers, a randomized-response frequency
oracle with group queries, candidate discovery over simulated clients, and
the end-to-end locally private k-means protocol with round accounting.

Structure discipline: functions prefixed client_ are the only ones that see
raw input points; functions prefixed server_ consume nothing but randomized
reports, public randomness, and previously broadcast values.  Every
server-to-clients broadcast counts as one round.

Client randomness is drawn from a per-round stream in user-index order, so
transcripts are seed-deterministic no matter how the simulation would
schedule the clients.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass, field

import numpy as np

from .budget import BudgetLedger
from .core import CandidateProvenance, CandidateSet, CenterSet, Dataset, WeightedDataset, sq_dists
from .candidates import radius_schedule
from .lsh import LshParams, bucket_many, sample_lsh
from .mechanisms import randomized_response_bit, randomized_response_bits, rr_probabilities
from .selection import CostOracle, noisy_local_search

MERSENNE31 = (1 << 31) - 1


def rr_debias_scale(epsilon: float) -> float:
    """(e^eps + 1) / (e^eps - 1): the unbiasing factor of the frequency oracle."""
    e = math.exp(epsilon)
    return (e + 1.0) / (e - 1.0)


@dataclass(frozen=True)
class PublicRandomness:
    """A +-1 matrix with one row per domain element and one column per user,
    reproducible from (seed, s, n).

    mode "full" materializes the matrix; mode "kwise" evaluates entries on
    demand from a degree-(order-1) polynomial over a 31-bit Mersenne prime,
    which keeps memory flat when only limited independence is needed.
    """

    seed: int
    s: int
    n: int
    mode: str = "full"
    order: int = 16

    def __post_init__(self):
        if self.mode not in ("full", "kwise"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.s < 1 or self.n < 1:
            raise ValueError("s and n must be >= 1")
        object.__setattr__(self, "_cache", {})

    def _coeffs(self) -> np.ndarray:
        cache = self._cache
        if "coeffs" not in cache:
            rng = np.random.default_rng(self.seed)
            cache["coeffs"] = rng.integers(0, MERSENNE31, size=self.order, dtype=np.int64)
        return cache["coeffs"]

    def _kwise_bits(self, flat_index: np.ndarray) -> np.ndarray:
        x = np.asarray(flat_index, dtype=np.uint64) % np.uint64(MERSENNE31)
        acc = np.zeros_like(x)
        for coef in self._coeffs():
            acc = (acc * x + np.uint64(coef)) % np.uint64(MERSENNE31)
        return (1 - 2 * (acc & np.uint64(1)).astype(np.int8)).astype(np.int8)

    def matrix(self) -> np.ndarray:
        cache = self._cache
        if "matrix" not in cache:
            if self.mode == "full":
                rng = np.random.default_rng(self.seed)
                cache["matrix"] = (rng.integers(0, 2, size=(self.s, self.n),
                                                dtype=np.int8) * 2 - 1)
            else:
                flat = np.arange(self.s * self.n, dtype=np.uint64)
                cache["matrix"] = self._kwise_bits(flat).reshape(self.s, self.n)
        return cache["matrix"]

    def entry(self, y: int, i: int) -> int:
        if not (0 <= y < self.s):
            raise IndexError(f"domain index {y} out of range [0, {self.s})")
        if not (0 <= i < self.n):
            raise IndexError(f"user index {i} out of range [0, {self.n})")
        if self.mode == "kwise":
            return int(self._kwise_bits(np.array([y * self.n + i]))[0])
        return int(self.matrix()[y, i])

    def entries_for_users(self, y_per_user: np.ndarray) -> np.ndarray:
        """Z[y_i, i] for every user i."""
        y = np.asarray(y_per_user, dtype=np.int64)
        if y.shape != (self.n,):
            raise ValueError("need one domain index per user")
        if (y < 0).any() or (y >= self.s).any():
            raise IndexError("domain index out of range")
        if self.mode == "kwise":
            return self._kwise_bits(y.astype(np.uint64) * np.uint64(self.n)
                                    + np.arange(self.n, dtype=np.uint64))
        return self.matrix()[y, np.arange(self.n)]


# ---------------------------------------------------------------------------
# Frequency oracle


def grouphist_randomize(y_i: int, i: int, Z: PublicRandomness, epsilon: float,
                        rng: np.random.Generator) -> int:
    """Client-side randomizer: randomized response on the user's matrix bit."""
    return randomized_response_bit(Z.entry(y_i, i), epsilon, rng)


def client_grouphist_bits(y_per_user: np.ndarray, Z: PublicRandomness,
                          epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """All clients' randomized bits, drawn in user order."""
    return randomized_response_bits(Z.entries_for_users(y_per_user), epsilon, rng)


def grouphist_aggregate(reports: np.ndarray, Z: PublicRandomness,
                        epsilon: float) -> np.ndarray:
    """Server-side estimate of every element's multiplicity.

    f_hat(y) = scale * sum_i z_i * Z[y, i], an unbiased estimator of the
    count of users holding y.  Accumulation is integer and chunked, so the
    result is exact and byte-stable.
    """
    z = np.asarray(reports)
    if z.shape != (Z.n,):
        raise ValueError(f"need one report per user, got {z.shape} for n={Z.n}")
    scale = rr_debias_scale(epsilon)
    z32 = z.astype(np.int32)
    sums = np.empty(Z.s, dtype=np.int64)
    chunk = max(1, min(Z.s, (1 << 24) // max(1, Z.n)))
    mat = Z.matrix()
    for lo in range(0, Z.s, chunk):
        hi = min(Z.s, lo + chunk)
        sums[lo:hi] = mat[lo:hi].astype(np.int32) @ z32
    return scale * sums.astype(float)


def grouphist_group_query(fhat: np.ndarray, Q, sigma) -> float:
    """Weighted group query sum_{y in Q} f_hat(y) * sigma(y)."""
    Q = np.asarray(Q, dtype=np.int64)
    sigma = np.asarray(sigma, dtype=float)
    if Q.size == 0:
        return 0.0
    if sigma.shape != Q.shape:
        raise ValueError("one weight per queried element required")
    if (sigma < 0).any() or (sigma > 1).any():
        raise ValueError("group-query weights must lie in [0, 1]")
    return float(np.dot(np.asarray(fhat, dtype=float)[Q], sigma))


def grouphist_error_envelope(n: int, epsilon: float, beta: float,
                             group_size: int = 1) -> float:
    """High-probability bound on the group-query error: each of the n
    summands is bounded by the debias scale, so Hoeffding gives
    scale * sqrt(2 * group_size * n * ln(2/beta))."""
    return rr_debias_scale(epsilon) * math.sqrt(
        2.0 * group_size * n * math.log(2.0 / beta))


# ---------------------------------------------------------------------------
# Transcript


@dataclass(frozen=True)
class LdpReport:
    """One client-to-server message."""

    round_index: int
    user: int
    payload: np.ndarray


@dataclass
class ProtocolRound:
    """One server broadcast plus every client's reply."""

    tag: str
    broadcast: dict
    reports: np.ndarray  # shape (n, width) or (n,)
    eps_per_user: float


@dataclass
class LdpTranscript:
    """Ordered record of all broadcasts and reports, with round accounting."""

    rounds: list[ProtocolRound] = field(default_factory=list)

    @property
    def round_count(self) -> int:
        return len(self.rounds)

    def per_user_epsilon(self) -> float:
        return math.fsum(r.eps_per_user for r in self.rounds)

    def reports_of(self, tag: str) -> np.ndarray:
        for r in self.rounds:
            if r.tag == tag:
                return r.reports
        raise KeyError(f"no round tagged {tag!r}")

    def broadcast_of(self, tag: str) -> dict:
        for r in self.rounds:
            if r.tag == tag:
                return r.broadcast
        raise KeyError(f"no round tagged {tag!r}")

    def messages(self):
        """Yield every message in order: the broadcast (user -1), then one
        report per user."""
        for idx, rnd in enumerate(self.rounds, start=1):
            yield idx, "s2c", -1, pack_broadcast(rnd.broadcast)
            reports = np.atleast_2d(np.asarray(rnd.reports))
            if reports.shape[0] == 1 and np.asarray(rnd.reports).ndim == 1:
                reports = np.asarray(rnd.reports).reshape(-1, 1)
            for i in range(reports.shape[0]):
                yield idx, "c2s", i, pack_array(reports[i])

    def serialize(self, fp) -> None:
        """Newline-delimited records: round, direction, user index, and the
        payload as base64 of a little-endian encoding."""
        for rnd, direction, user, blob in self.messages():
            b64 = base64.b64encode(blob).decode("ascii")
            fp.write(f'{{"round": {rnd}, "dir": "{direction}", '
                     f'"user": {user}, "payload": "{b64}"}}\n')


def pack_array(arr: np.ndarray) -> bytes:
    """Little-endian encoding: dtype kind, itemsize, ndim, shape, raw data."""
    arr = np.asarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    head = (arr.dtype.kind.encode("ascii")
            + np.int64(arr.dtype.itemsize).astype("<i8").tobytes()
            + np.int64(arr.ndim).astype("<i8").tobytes()
            + np.asarray(arr.shape, dtype="<i8").tobytes())
    return head + le.tobytes()


def pack_broadcast(payload: dict) -> bytes:
    parts = []
    for key in sorted(payload):
        blob = pack_array(np.asarray(payload[key]))
        kb = key.encode("ascii")
        parts.append(len(kb).to_bytes(2, "little") + kb
                     + len(blob).to_bytes(8, "little") + blob)
    return b"".join(parts)


# ---------------------------------------------------------------------------
# Candidate discovery over clients


@dataclass(frozen=True)
class LdpKnobs:
    """Desk-scale tuning of the local protocol.

    universe_cap bounds the report domain of the bucket frequency oracle so
    the server-side scan stays computable; kept_cap bounds the number of
    buckets carried into the coordinate round; min_radius_factor prunes the
    radius sweep exactly as in the centralized pipeline.  None of these
    affect the per-user budget accounting.
    """

    universe_cap: int = 1024
    kept_cap: int = 32
    tau_factor: float = 1.0
    tau_frac: float = 0.0  # floor on the keep threshold as a fraction of n
    min_radius_factor: float = 0.0
    max_radius_factor: float = 1.0
    z_mode: str = "full"
    oracle_slack_const: float = 2.5


def client_bucket_ids(points: np.ndarray, func) -> np.ndarray:
    """Each client hashes its own point; simulated in one vectorized call."""
    return bucket_many(func, points)


def client_coordinate_reports(points: np.ndarray, member_slot: np.ndarray,
                              num_slots: int, lam: float, epsilon: float,
                              rng: np.random.Generator) -> np.ndarray:
    """Round-two randomizer: each client fills its member slot (if any) with
    its coordinates and every other slot with zeros, then adds Laplace noise
    to all entries.

    Changing one client's point moves at most two slots by at most the L1
    norm of a point, which is at most sqrt(d) * lam, so per-entry scale
    2 sqrt(d) lam / epsilon yields epsilon per user.  Clients outside every
    kept bucket send pure-noise reports of the same shape, so the message
    pattern is input-independent.
    """
    n, d = points.shape
    width = num_slots * d
    reports = np.zeros((n, width))
    rows = np.flatnonzero(member_slot >= 0)
    if rows.size:
        cols = member_slot[rows] * d
        for off in range(d):
            reports[rows, cols + off] = points[rows, off]
    scale = 2.0 * math.sqrt(d) * lam / epsilon
    if width:
        reports += rng.laplace(scale=scale, size=(n, width))
    return reports


def server_select_heavy(fhat: np.ndarray, tau: float, cap: int) -> np.ndarray:
    """Bucket ids whose estimated count clears tau, largest first, capped."""
    ids = np.flatnonzero(fhat >= tau)
    order = np.argsort(-fhat[ids], kind="stable")
    return ids[order][:cap]


def server_bucket_means(report_sums: np.ndarray, counts: np.ndarray,
                        d: int, lam: float) -> np.ndarray:
    """Noisy sums divided by estimated counts, projected back into the ball."""
    denom = np.maximum(np.asarray(counts, dtype=float), 1.0)
    centers = report_sums.reshape(-1, d) / denom[:, None]
    norms = np.linalg.norm(centers, axis=1)
    over = norms > lam
    if over.any():
        centers[over] *= (lam / norms[over])[:, None]
    return centers


def ldp_good_center(clients: np.ndarray, lam: float, epsilon: float, beta: float,
                    a: float, b: float, rng: np.random.Generator,
                    knobs: LdpKnobs = LdpKnobs(),
                    transcript: LdpTranscript | None = None,
                    ledger: BudgetLedger | None = None) -> CandidateSet:
    """Two-round candidate discovery over simulated clients.

    Round 1: the server broadcasts sampled hash functions over a radius
    sweep plus public randomness; each client reports, per radius, one
    frequency-oracle bit about its bucket id (epsilon/2 split evenly over
    the radii).  The server estimates bucket counts and keeps those above a
    threshold, capped at ceil(epsilon * n^(1/3 + a)).

    Round 2: the server broadcasts the kept bucket list; every client sends
    a noise-shaped coordinate report (members carry their point, the rest
    send dummies), and the server averages each kept bucket using the
    round-1 count estimates as denominators.
    """
    clients = np.asarray(clients, dtype=float)
    n, d = clients.shape
    if n < 2:
        raise ValueError("need at least 2 clients")
    radii = radius_schedule(n, lam, knobs.min_radius_factor,
                            knobs.max_radius_factor)
    L = len(radii)
    eps_r1 = (epsilon / 2.0) / L
    # A client occupies at most one kept slot across the whole sweep, so the
    # coordinate round is covered by its full half-budget in one piece.
    eps_r2 = epsilon / 2.0
    universe = min(n ** 3, knobs.universe_cap)

    params = [LshParams.derive(r, a, b, n, d) for r in radii]
    funcs = [sample_lsh(p, child, universe=universe)
             for p, child in zip(params, rng.spawn(L))]
    z_seeds = [int(s) for s in rng.integers(0, 2 ** 62, size=L)]
    zs = [PublicRandomness(seed, universe, n, mode=knobs.z_mode)
          for seed in z_seeds]

    broadcast1 = {
        "radii": np.asarray(radii),
        "universe": np.asarray([universe]),
        "z_seeds": np.asarray(z_seeds),
        "hash_mul": np.asarray([f.mul for f in funcs]),
        "hash_add": np.asarray([f.add for f in funcs]),
        "projections": np.concatenate([f.projections.ravel() for f in funcs]),
        "offsets": np.concatenate([f.offsets for f in funcs]),
    }

    ids_per_radius = [client_bucket_ids(clients, f) for f in funcs]
    round1_rng = rng.spawn(1)[0]
    bits = np.empty((n, L), dtype=np.int8)
    for l in range(L):
        bits[:, l] = client_grouphist_bits(ids_per_radius[l], zs[l], eps_r1,
                                           round1_rng)
    if transcript is not None:
        transcript.rounds.append(ProtocolRound("good-center/frequency",
                                               broadcast1, bits, epsilon / 2.0))

    fhats = [grouphist_aggregate(bits[:, l], zs[l], eps_r1) for l in range(L)]
    tau = max(knobs.tau_factor * rr_debias_scale(eps_r1) * math.sqrt(
        2.0 * n * math.log(2.0 * universe * L / beta)),
        knobs.tau_frac * n)
    size_cap = min(math.ceil(epsilon * n ** (1.0 / 3.0 + a)), knobs.kept_cap)
    pool = []
    for l in range(L):
        for u in server_select_heavy(fhats[l], tau, size_cap):
            pool.append((float(fhats[l][u]), l, int(u)))
    pool.sort(key=lambda t: (-t[0], t[1], t[2]))
    pool = pool[:size_cap]

    kept_radius = np.asarray([l for _, l, _ in pool], dtype=np.int64)
    kept_bucket = np.asarray([u for _, _, u in pool], dtype=np.int64)
    kept_counts = np.asarray([c for c, _, _ in pool])
    broadcast2 = {"kept_radius": kept_radius, "kept_bucket": kept_bucket}

    # Each client locates its slot: the first kept bucket containing it.
    member_slot = np.full(n, -1, dtype=np.int64)
    for slot, (_, l, u) in enumerate(pool):
        mask = (ids_per_radius[l] == u) & (member_slot < 0)
        member_slot[mask] = slot

    round2_rng = rng.spawn(1)[0]
    reports2 = client_coordinate_reports(clients, member_slot, len(pool), lam,
                                         eps_r2, round2_rng)
    if transcript is not None:
        transcript.rounds.append(ProtocolRound("good-center/coordinates",
                                               broadcast2, reports2,
                                               epsilon / 2.0))
    if ledger is not None:
        ledger.charge("ldp_good_center/frequency", epsilon / 2.0, 0.0,
                      rule="basic", detail=f"{L} radii at eps {eps_r1:.3g} per user")
        ledger.charge("ldp_good_center/coordinates", epsilon / 2.0, 0.0,
                      rule="basic", detail=f"{len(pool)} kept buckets")

    if not pool:
        return CandidateSet(np.empty((0, d)))
    sums = reports2.sum(axis=0)
    centers = server_bucket_means(sums, kept_counts, d, lam)
    provenance = [CandidateProvenance(iteration=0, radius=radii[l], partition=-1,
                                      bucket=u, noisy_count=c)
                  for c, l, u in pool]
    return CandidateSet(centers, provenance)


# ---------------------------------------------------------------------------
# End-to-end protocol


@dataclass
class LdpKMeansResult:
    centers: CenterSet
    transcript: LdpTranscript
    candidates: CandidateSet
    weights: np.ndarray
    oracle_slack: float


def client_nearest_candidate(points: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Each client resolves its nearest broadcast candidate locally."""
    return np.argmin(sq_dists(points, candidates), axis=1)


def weight_estimation_round(points: np.ndarray, candidates: np.ndarray,
                            epsilon: float, beta: float, tag: str,
                            rng: np.random.Generator,
                            transcript: LdpTranscript | None,
                            ledger: BudgetLedger | None,
                            z_mode: str = "full") -> np.ndarray:
    """One broadcast-and-report round estimating, for every candidate, how
    many clients it serves."""
    n = points.shape[0]
    s = candidates.shape[0]
    nearest_idx = client_nearest_candidate(points, candidates)
    seed = int(rng.integers(0, 2 ** 62))
    Z = PublicRandomness(seed, s, n, mode=z_mode)
    bits = client_grouphist_bits(nearest_idx, Z, epsilon, rng.spawn(1)[0])
    if transcript is not None:
        transcript.rounds.append(ProtocolRound(
            tag, {"candidates": candidates, "z_seed": np.asarray([seed])},
            bits, epsilon))
    if ledger is not None:
        ledger.charge(tag, epsilon, 0.0, rule="basic",
                      detail=f"frequency oracle over {s} candidates")
    return grouphist_aggregate(bits, Z, epsilon)


def ldp_k_means_detailed(clients: np.ndarray, k: int, epsilon: float, beta: float,
                         a: float, b: float, rng: np.random.Generator, lam: float,
                         knobs: LdpKnobs = LdpKnobs(),
                         ledger: BudgetLedger | None = None,
                         transcript: LdpTranscript | None = None) -> LdpKMeansResult:
    """Full protocol: candidate discovery at epsilon/2, weight estimation at
    epsilon/2, then a server-local swap search over the weighted candidates.

    The swap search runs against the estimated weights with a declared
    oracle slack proportional to lam^2 / eps * sqrt(|Y| n ln(n/beta)); the
    estimated weights may be negative and the search never assumes
    otherwise.  Rounds: two for discovery plus one for weights.
    """
    clients = np.asarray(clients, dtype=float)
    n = clients.shape[0]
    if transcript is None:
        transcript = LdpTranscript()
    Y = ldp_good_center(clients, lam, epsilon / 2.0, beta, a, b, rng,
                        knobs=knobs, transcript=transcript, ledger=ledger)
    if Y.size < k:
        raise ValueError(
            f"candidate discovery produced {Y.size} centers, need >= k={k}; "
            "loosen the discovery knobs or increase the budget")
    eps_w = epsilon / 2.0
    c_hat = weight_estimation_round(clients, Y.centers, eps_w, beta,
                                    "k-means/weights", rng, transcript, ledger,
                                    z_mode=knobs.z_mode)
    weighted = WeightedDataset(Y.centers, c_hat, lam)
    slack = knobs.oracle_slack_const * (lam * lam / eps_w) * math.sqrt(
        Y.size * n * math.log(n / beta))
    oracle = CostOracle.weighted(weighted, Y.centers, slack)
    centers = noisy_local_search(oracle, Y.centers, k, n, lam)
    return LdpKMeansResult(centers=centers, transcript=transcript,
                           candidates=Y, weights=c_hat, oracle_slack=slack)


def ldp_k_means(clients: np.ndarray, k: int, epsilon: float, beta: float,
                a: float, b: float, rng: np.random.Generator, lam: float,
                knobs: LdpKnobs = LdpKnobs(),
                ledger: BudgetLedger | None = None) -> tuple[CenterSet, LdpTranscript]:
    res = ldp_k_means_detailed(clients, k, epsilon, beta, a, b, rng, lam,
                               knobs=knobs, ledger=ledger)
    return res.centers, res.transcript
