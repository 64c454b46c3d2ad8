"""Experiment harness: configuration, planted-mixture generation, point-file
ingestion, and pipeline orchestration with metrics output.

Determinism contract: a (config, seed) pair fully determines metrics.jsonl,
summary.csv, and any transcript files, byte for byte.  Wall-clock timings go
to a separate timings.jsonl that is explicitly outside that contract.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .budget import BudgetLedger, PrivacyBudget
from .candidates import DiscoveryKnobs, PeelSchedule, private_k_means_candidates
from .core import (CenterSet, Dataset, WeightedDataset, assign_labels, cost,
                   kmeanspp_lloyd, opt_over_candidates)
from .coreset import Coreset, centralized_coreset, coreset_check, ldp_coreset
from .ldp import LdpKnobs, ldp_k_means_detailed
from .selection import private_local_search

FILE_MAGIC = "dpkm"
FILE_VERSION = "v1"


@dataclass
class ExperimentConfig:
    """Everything a run needs; flags on the CLI mirror these fields."""

    pipeline: str = "centralized"          # centralized | ldp | coreset
    coreset_model: str = "centralized"     # which coreset when pipeline=coreset
    n: int = 2000
    d: int = 2
    k: int = 2
    lam: float = 1.0
    epsilon: float = 1.0
    delta: float = 1e-5
    beta: float = 0.05
    seed: int = 0
    trials: int = 1
    dataset_path: str | None = None        # ingest instead of generating
    separation: float = 0.5
    sigma: float = 0.02
    a: float = 0.2
    b: float = 0.1
    gamma_const: float = 1.0
    peel_T: int | None = None
    eps_split: tuple[float, float] = (0.5, 0.5)
    coreset_eps_split: tuple[float, float, float] = (0.4, 0.4, 0.2)
    # discovery knobs
    threshold_factor: float = 1.0
    partition_override: int | None = None
    min_radius_factor: float = 0.0
    max_radius_factor: float = 1.0
    iterations_override: int | None = None
    candidate_cap_override: int | None = None
    bucket_diam_factor: float | None = None
    na_mode: str = "laplace"
    # local-model knobs
    universe_cap: int = 1024
    kept_cap: int = 32
    tau_factor: float = 1.0
    tau_frac: float = 0.0
    z_mode: str = "full"
    oracle_slack_const: float = 2.5
    check_trials: int = 40
    # output
    out_dir: str | None = None
    write_transcripts: bool = True
    norm_policy: str = "reject"
    workers: int = 1
    thresholds: dict = field(default_factory=dict)

    def discovery_knobs(self) -> DiscoveryKnobs:
        return DiscoveryKnobs(
            threshold_factor=self.threshold_factor,
            partition_override=self.partition_override,
            min_radius_factor=self.min_radius_factor,
            max_radius_factor=self.max_radius_factor,
            iterations_override=self.iterations_override,
            candidate_cap_override=self.candidate_cap_override,
            bucket_diam_factor=self.bucket_diam_factor,
            na_mode=self.na_mode,
        )

    def ldp_knobs(self) -> LdpKnobs:
        return LdpKnobs(
            universe_cap=self.universe_cap,
            kept_cap=self.kept_cap,
            tau_factor=self.tau_factor,
            tau_frac=self.tau_frac,
            min_radius_factor=self.min_radius_factor,
            max_radius_factor=self.max_radius_factor,
            z_mode=self.z_mode,
            oracle_slack_const=self.oracle_slack_const,
        )

    def resolved_out_dir(self) -> str:
        return self.out_dir or os.environ.get("DPKM_OUT", ".")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**data)
        for name in ("eps_split", "coreset_eps_split"):
            setattr(cfg, name, tuple(getattr(cfg, name)))
        return cfg

    def validate(self) -> None:
        if not (0 < self.b < self.a < 1):
            raise ValueError(f"need 0 < b < a < 1, got a={self.a}, b={self.b}")
        if not (self.epsilon > 0):
            raise ValueError("epsilon must be > 0")
        if not (0 <= self.delta < 1):
            raise ValueError("delta must be in [0, 1)")
        if self.pipeline not in ("centralized", "ldp", "coreset"):
            raise ValueError(f"unknown pipeline {self.pipeline!r}")


@dataclass
class MixtureSample:
    dataset: Dataset
    labels: np.ndarray
    true_centers: np.ndarray


def generate_mixture(k: int, d: int, n: int, separation: float, sigma: float,
                     lam: float, rng: np.random.Generator) -> MixtureSample:
    """Planted instance: k centers at pairwise distance >= separation * lam,
    gaussian clouds of scale sigma * lam, points clipped into the ball."""
    if k < 1 or d < 1 or n < 1:
        raise ValueError("k, d, n must be positive")
    min_dist = separation * lam
    centers = np.empty((k, d))
    placed = 0
    attempts = 0
    max_attempts = 5000 * k
    while placed < k:
        if attempts >= max_attempts:
            raise ValueError(
                f"could not place {k} centers at pairwise distance >= "
                f"{min_dist:.3g} inside a ball of radius {lam:.3g} in "
                f"dimension {d}; lower the separation or k")
        attempts += 1
        raw = rng.standard_normal(d)
        norm = np.linalg.norm(raw)
        if norm == 0:
            continue
        cand = raw / norm * (lam * 0.9 * rng.uniform() ** (1.0 / d))
        if placed == 0 or np.linalg.norm(centers[:placed] - cand, axis=1).min() >= min_dist:
            centers[placed] = cand
            placed += 1
    labels = rng.integers(0, k, size=n)
    pts = centers[labels] + sigma * lam * rng.standard_normal((n, d))
    norms = np.linalg.norm(pts, axis=1)
    over = norms > lam
    if over.any():
        pts[over] *= (lam / norms[over])[:, None]
    return MixtureSample(Dataset(pts, lam), labels, centers)


def label_purity(true_labels: np.ndarray, pred_labels: np.ndarray) -> float:
    """Fraction of points whose predicted cluster's majority true label
    matches their own."""
    true_labels = np.asarray(true_labels)
    pred_labels = np.asarray(pred_labels)
    matched = 0
    for c in np.unique(pred_labels):
        mask = pred_labels == c
        values, counts = np.unique(true_labels[mask], return_counts=True)
        matched += counts.max()
    return matched / true_labels.size


# ---------------------------------------------------------------------------
# Point files


def _format_float(x: float) -> str:
    return repr(float(x))


def write_points(path: str, data: Dataset | WeightedDataset) -> None:
    weighted = isinstance(data, WeightedDataset)
    header = f"{FILE_MAGIC} {FILE_VERSION} d={data.d} lambda={_format_float(data.lam)}"
    if weighted:
        header += " weighted"
    with open(path, "w") as fp:
        fp.write(header + "\n")
        for i in range(data.n):
            row = [_format_float(v) for v in data.points[i]]
            if weighted:
                row.append(_format_float(data.weights[i]))
            fp.write(",".join(row) + "\n")


def ingest(path: str, norm_policy: str = "reject") -> Dataset | WeightedDataset:
    """Read a point file; validates the header, per-line dimension, and that
    every norm is within the declared ball (reject or rescale per flag)."""
    if norm_policy not in ("reject", "rescale"):
        raise ValueError(f"unknown norm policy {norm_policy!r}")
    with open(path) as fp:
        header = fp.readline().strip()
        parts = header.split()
        if len(parts) < 4 or parts[0] != FILE_MAGIC or parts[1] != FILE_VERSION:
            raise ValueError(f"{path}:1: bad header {header!r}")
        try:
            d = int(parts[2].removeprefix("d="))
            lam = float(parts[3].removeprefix("lambda="))
        except ValueError as exc:
            raise ValueError(f"{path}:1: unparseable header fields") from exc
        weighted = len(parts) > 4 and parts[4] == "weighted"
        want = d + 1 if weighted else d
        rows = []
        weights = []
        for lineno, line in enumerate(fp, start=2):
            line = line.strip()
            if not line:
                continue
            vals = line.split(",")
            if len(vals) != want:
                raise ValueError(
                    f"{path}:{lineno}: expected {want} values "
                    f"(d={d}{', weighted' if weighted else ''}), got {len(vals)}")
            try:
                nums = [float(v) for v in vals]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: unparseable number") from exc
            if weighted:
                rows.append(nums[:-1])
                weights.append(nums[-1])
            else:
                rows.append(nums)
    pts = np.asarray(rows)
    if pts.size == 0:
        raise ValueError(f"{path}: no points")
    norms = np.linalg.norm(pts, axis=1)
    bad = norms > lam * (1 + 1e-9)
    if bad.any():
        if norm_policy == "reject":
            first = int(np.flatnonzero(bad)[0])
            raise ValueError(
                f"{path}:{first + 2}: point norm {norms[first]:.6g} exceeds "
                f"lambda={lam:.6g} ({int(bad.sum())} offending points); "
                "pass norm_policy='rescale' to project them onto the ball")
        pts[bad] *= (lam / norms[bad])[:, None]
    if weighted:
        return WeightedDataset(pts, np.asarray(weights), lam)
    return Dataset(pts, lam)


# ---------------------------------------------------------------------------
# Pipelines


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonify(v) for v in obj.tolist()]
    return obj


def _load_trial_dataset(config: ExperimentConfig, rng: np.random.Generator) -> Dataset:
    if config.dataset_path:
        data = ingest(config.dataset_path, config.norm_policy)
        if isinstance(data, WeightedDataset):
            raise ValueError("pipelines run on unweighted datasets")
        return data
    return generate_mixture(config.k, config.d, config.n, config.separation,
                            config.sigma, config.lam, rng).dataset


def run_centralized_trial(config: ExperimentConfig, trial: int) -> dict:
    seed = config.seed ^ trial
    rng = np.random.default_rng(seed)
    S = _load_trial_dataset(config, rng)
    ledger = BudgetLedger()
    f_cand, f_sel = config.eps_split
    eps_cand, eps_sel = config.epsilon * f_cand, config.epsilon * f_sel
    schedule = PeelSchedule(n=S.n, d=S.d, k=config.k, beta=config.beta,
                            epsilon=eps_cand, delta=config.delta / 2.0,
                            a=config.a, b=config.b,
                            gamma_const=config.gamma_const, T=config.peel_T)
    Y = private_k_means_candidates(S, config.k, config.beta, eps_cand,
                                   config.delta / 2.0, schedule, rng,
                                   ledger=ledger, knobs=config.discovery_knobs())
    record: dict = {"trial": trial, "seed": seed, "pipeline": "centralized"}
    if Y.size < config.k:
        record["status"] = "failed"
        record["reason"] = f"only {Y.size} candidates discovered, need {config.k}"
        record["ledger"] = ledger.as_records()
        return record
    D = private_local_search(S, Y, config.k, eps_sel, config.delta / 2.0,
                             config.beta, S.lam, rng, ledger=ledger)
    baseline = kmeanspp_lloyd(S, config.k, np.random.default_rng(seed + 1))
    released = {
        "private_cost": cost(S, D),
        "candidate_count": Y.size,
        "centers": D.centers,
    }
    record.update({
        "status": "ok",
        "released": _jsonify(released),
        "baseline_cost": cost(S, baseline),
        "cost_ratio": released["private_cost"] / max(cost(S, baseline), 1e-300),
        "ledger": ledger.as_records(),
        "eps_spent": ledger.epsilon_spent,
        "delta_spent": ledger.delta_spent,
        "budget_ok": ledger.matches(PrivacyBudget(config.epsilon, config.delta)),
    })
    if Y.size <= 20 and config.k <= 4:
        _, opt_cost = opt_over_candidates(S, Y, config.k)
        record["opt_over_candidates_cost"] = opt_cost
    return record


def run_ldp_trial(config: ExperimentConfig, trial: int) -> dict:
    seed = config.seed ^ trial
    rng = np.random.default_rng(seed)
    S = _load_trial_dataset(config, rng)
    ledger = BudgetLedger()
    res = ldp_k_means_detailed(S.points, config.k, config.epsilon, config.beta,
                               config.a, config.b, rng, S.lam,
                               knobs=config.ldp_knobs(), ledger=ledger)
    baseline = kmeanspp_lloyd(S, config.k, np.random.default_rng(seed + 1))
    released = {
        "private_cost": cost(S, res.centers),
        "candidate_count": res.candidates.size,
        "rounds": res.transcript.round_count,
        "centers": res.centers.centers,
    }
    record = {
        "trial": trial, "seed": seed, "pipeline": "ldp", "status": "ok",
        "released": _jsonify(released),
        "baseline_cost": cost(S, baseline),
        "cost_ratio": released["private_cost"] / max(cost(S, baseline), 1e-300),
        "rounds": res.transcript.round_count,
        "per_user_epsilon": res.transcript.per_user_epsilon(),
        "ledger": ledger.as_records(),
        "eps_spent": ledger.epsilon_spent,
        "delta_spent": ledger.delta_spent,
        "budget_ok": ledger.matches(PrivacyBudget(config.epsilon, 0.0)),
    }
    return record, res.transcript


def run_coreset_trial(config: ExperimentConfig, trial: int) -> dict:
    seed = config.seed ^ trial
    rng = np.random.default_rng(seed)
    S = _load_trial_dataset(config, rng)
    ledger = BudgetLedger()
    transcript = None
    if config.coreset_model == "ldp":
        result = ldp_coreset(S.points, config.k, config.epsilon, config.beta,
                             config.a, config.b, rng, S.lam,
                             knobs=config.ldp_knobs(), ledger=ledger)
        transcript = result.transcript
    else:
        result = centralized_coreset(S, config.k, config.epsilon, config.delta,
                                     config.beta, rng,
                                     discovery_knobs=config.discovery_knobs(),
                                     ledger=ledger,
                                     eps_fractions=config.coreset_eps_split)
    check = coreset_check(S, result, config.check_trials,
                          np.random.default_rng(seed + 2), k=config.k)
    released = {
        "coreset_points": result.weighted.points,
        "coreset_weights": result.weighted.weights,
        "size": result.size,
    }
    record = {
        "trial": trial, "seed": seed, "pipeline": "coreset",
        "coreset_model": config.coreset_model, "status": "ok",
        "released": _jsonify(released),
        "gamma": check.gamma, "eta": check.eta,
        "eta_at": _jsonify(check.eta_at),
        "check_trials": check.trials,
        "ledger": ledger.as_records(),
        "eps_spent": ledger.epsilon_spent,
        "delta_spent": ledger.delta_spent,
        "budget_ok": ledger.matches(PrivacyBudget(
            config.epsilon,
            config.delta if config.coreset_model == "centralized" else 0.0)),
    }
    if transcript is not None:
        record["rounds"] = transcript.round_count
        record["per_user_epsilon"] = transcript.per_user_epsilon()
    return record, transcript


def summarize(records: list[dict]) -> dict:
    ok = [r for r in records if r.get("status") == "ok"]
    out = {"trials": len(records), "ok": len(ok)}
    for key in ("cost_ratio", "gamma", "eta"):
        vals = [r[key] for r in ok if key in r]
        if vals:
            out[f"median_{key}"] = float(np.median(vals))
            out[f"p10_{key}"] = float(np.quantile(vals, 0.1))
            out[f"p90_{key}"] = float(np.quantile(vals, 0.9))
    rounds = [r["rounds"] for r in ok if "rounds" in r]
    if rounds:
        out["rounds"] = int(max(rounds))
    eps = [r["eps_spent"] for r in ok if "eps_spent" in r]
    if eps:
        out["eps_spent"] = float(max(eps))
    out["budget_ok"] = all(r.get("budget_ok", False) for r in ok) if ok else False
    return out


def check_thresholds(summary: dict, thresholds: dict) -> list[dict]:
    """Each threshold is max_<key> or min_<key> against the summary."""
    results = []
    for name, bound in thresholds.items():
        if name.startswith("max_"):
            key, passed = name[4:], summary.get(name[4:], math.inf) <= bound
        elif name.startswith("min_"):
            key, passed = name[4:], summary.get(name[4:], -math.inf) >= bound
        else:
            raise ValueError(f"threshold {name!r} must start with max_ or min_")
        results.append({"threshold": name, "bound": bound,
                        "value": summary.get(key), "passed": bool(passed)})
    return results


def _run_one_trial(config: ExperimentConfig, trial: int) -> tuple[dict, float]:
    """One trial, writing any transcript or coreset file itself so parallel
    workers never ship large payloads back."""
    out_dir = config.resolved_out_dir()
    t0 = time.perf_counter()
    transcript = None
    coreset_out = None
    if config.pipeline == "centralized":
        rec = run_centralized_trial(config, trial)
    elif config.pipeline == "ldp":
        rec, transcript = run_ldp_trial(config, trial)
    else:
        rec, transcript = run_coreset_trial(config, trial)
        if rec.get("status") == "ok":
            coreset_out = WeightedDataset(
                np.asarray(rec["released"]["coreset_points"]),
                np.asarray(rec["released"]["coreset_weights"]), config.lam)
    if transcript is not None and config.write_transcripts:
        with open(os.path.join(out_dir, f"transcript-{trial}.ndjson"), "w") as fp:
            transcript.serialize(fp)
    if coreset_out is not None:
        write_points(os.path.join(out_dir, f"coreset-{trial}.dpkm"), coreset_out)
    return rec, time.perf_counter() - t0


def run_experiment(config: ExperimentConfig) -> tuple[list[dict], bool]:
    """Run all trials, write metrics.jsonl + summary.csv (+ transcripts and
    coreset files), and return the records with the threshold verdict.

    Trials are independent; with workers > 1 they run in a process pool and
    results are still written in trial order, so output files are identical
    either way.
    """
    config.validate()
    out_dir = config.resolved_out_dir()
    os.makedirs(out_dir, exist_ok=True)
    records = []
    timings = []
    if config.workers > 1 and config.trials > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for trial, (rec, dt) in enumerate(
                    pool.map(_run_one_trial, [config] * config.trials,
                             range(config.trials))):
                records.append(rec)
                timings.append({"trial": trial, "wall_time_s": dt})
    else:
        for trial in range(config.trials):
            rec, dt = _run_one_trial(config, trial)
            records.append(rec)
            timings.append({"trial": trial, "wall_time_s": dt})

    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fp:
        for rec in records:
            fp.write(json.dumps(_jsonify(rec), sort_keys=True) + "\n")
    summary = summarize(records)
    checks = check_thresholds(summary, config.thresholds)
    with open(os.path.join(out_dir, "summary.csv"), "w") as fp:
        keys = sorted(summary)
        fp.write(",".join(keys) + "\n")
        fp.write(",".join(str(summary[k]) for k in keys) + "\n")
        if checks:
            fp.write("threshold,bound,value,passed\n")
            for c in checks:
                fp.write(f'{c["threshold"]},{c["bound"]},{c["value"]},{c["passed"]}\n')
    with open(os.path.join(out_dir, "timings.jsonl"), "w") as fp:
        for t in timings:
            fp.write(json.dumps(t, sort_keys=True) + "\n")
    ok = all(c["passed"] for c in checks) and all(
        r.get("status") == "ok" for r in records)
    return records, ok
