"""Report rendering: reads a metrics.jsonl produced by a run and writes a
delimited summary next to a set of matplotlib figures.

Figures are rendered headless (Agg) straight to files; nothing here touches
private state, only the released metrics.
"""

from __future__ import annotations

import json
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def load_metrics(path: str) -> list[dict]:
    records = []
    with open(path) as fp:
        for line in fp:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def write_report_csv(records: list[dict], path: str) -> None:
    cols = ["trial", "pipeline", "status", "private_cost", "baseline_cost",
            "cost_ratio", "candidate_count", "rounds", "gamma", "eta",
            "eps_spent", "delta_spent"]
    with open(path, "w") as fp:
        fp.write(",".join(cols) + "\n")
        for r in records:
            released = r.get("released", {})
            row = {
                "trial": r.get("trial"), "pipeline": r.get("pipeline"),
                "status": r.get("status"),
                "private_cost": released.get("private_cost"),
                "baseline_cost": r.get("baseline_cost"),
                "cost_ratio": r.get("cost_ratio"),
                "candidate_count": released.get("candidate_count"),
                "rounds": r.get("rounds", released.get("rounds")),
                "gamma": r.get("gamma"), "eta": r.get("eta"),
                "eps_spent": r.get("eps_spent"), "delta_spent": r.get("delta_spent"),
            }
            fp.write(",".join("" if row[c] is None else str(row[c]) for c in cols) + "\n")


def _save(fig, out_dir: str, name: str, written: list[str]) -> None:
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)


def render_figures(records: list[dict], out_dir: str) -> list[str]:
    """Render whatever the metrics support: cost comparisons, cost-ratio
    distribution, budget breakdown, and the coreset envelope when present."""
    written: list[str] = []
    ok = [r for r in records if r.get("status") == "ok"]
    if not ok:
        return written

    ratios = [r["cost_ratio"] for r in ok if "cost_ratio" in r]
    if ratios:
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
        trials = [r["trial"] for r in ok if "cost_ratio" in r]
        private = [r["released"]["private_cost"] for r in ok if "cost_ratio" in r]
        baseline = [r["baseline_cost"] for r in ok if "cost_ratio" in r]
        axes[0].plot(trials, private, "o-", label="private")
        axes[0].plot(trials, baseline, "s--", label="baseline")
        axes[0].set_xlabel("trial")
        axes[0].set_ylabel("clustering cost")
        axes[0].legend()
        axes[1].hist(ratios, bins=min(20, max(3, len(ratios))))
        axes[1].axvline(float(np.median(ratios)), color="k", linestyle=":",
                        label=f"median {np.median(ratios):.2f}")
        axes[1].set_xlabel("private / baseline cost ratio")
        axes[1].legend()
        fig.suptitle("Clustering cost vs non-private baseline")
        _save(fig, out_dir, "fig_cost.png", written)

    ledgers = [r.get("ledger") for r in ok if r.get("ledger")]
    if ledgers:
        labels = {}
        for entry in ledgers[0]:
            labels[entry["label"]] = labels.get(entry["label"], 0.0) + entry["epsilon"]
        fig, ax = plt.subplots(figsize=(7, 3.2))
        names = list(labels)
        ax.barh(names, [labels[n] for n in names])
        ax.set_xlabel("epsilon charged (first trial)")
        fig.suptitle("Privacy budget breakdown")
        _save(fig, out_dir, "fig_budget.png", written)

    etas = [(r["trial"], r["eta"], r["gamma"]) for r in ok if "eta" in r]
    if etas:
        fig, ax = plt.subplots(figsize=(6, 3.2))
        ax.plot([t for t, _, _ in etas], [e for _, e, _ in etas], "o-",
                label="additive gap eta")
        ax2 = ax.twinx()
        ax2.plot([t for t, _, _ in etas], [g for _, _, g in etas], "s--",
                 color="tab:red", label="gamma")
        ax.set_xlabel("trial")
        ax.set_ylabel("eta")
        ax2.set_ylabel("gamma")
        fig.suptitle("Coreset envelope across trials")
        _save(fig, out_dir, "fig_coreset.png", written)

    rounds = [r["rounds"] for r in ok if "rounds" in r]
    if rounds:
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(range(len(rounds)), rounds, "o")
        ax.set_ylim(0, max(rounds) + 1)
        ax.set_xlabel("trial")
        ax.set_ylabel("protocol rounds")
        fig.suptitle("Interaction rounds")
        _save(fig, out_dir, "fig_rounds.png", written)

    return written


def render_report(metrics_path: str, out_dir: str) -> tuple[str, list[str]]:
    os.makedirs(out_dir, exist_ok=True)
    records = load_metrics(metrics_path)
    csv_path = os.path.join(out_dir, "report.csv")
    write_report_csv(records, csv_path)
    figures = render_figures(records, out_dir)
    return csv_path, figures
