"""Command-line interface.

Subcommands: gen (write a planted dataset), run (execute a pipeline and emit
metrics), check-coreset (measure an envelope for a stored coreset against a
dataset), calibrate-lsh (report achieved hash parameters and measured
collision rates), and report (render figures and a delimited summary from a
metrics file).  Exit code 0 means every configured regression threshold
passed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import harness
from .coreset import Coreset, coreset_check
from .harness import ExperimentConfig, generate_mixture, ingest, write_points
from .lsh import LshParams, collision_probability_estimate
from .report import render_report


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its fields")
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in ("thresholds", "eps_split", "coreset_eps_split"):
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, default=None,
                           type=lambda s: s.lower() in ("1", "true", "yes"))
        elif isinstance(f.default, int) and not isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, default=None, type=int)
        elif isinstance(f.default, float):
            p.add_argument(flag, dest=f.name, default=None, type=float)
        else:
            p.add_argument(flag, dest=f.name, default=None)
    p.add_argument("--threshold", action="append", default=[],
                   metavar="NAME=VALUE",
                   help="regression threshold, e.g. max_cost_ratio=25")


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    data = {}
    if args.config:
        with open(args.config) as fp:
            data.update(json.load(fp))
    int_or_none = {"partition_override", "iterations_override", "peel_T",
                   "candidate_cap_override"}
    float_or_none = {"bucket_diam_factor"}
    for f in dataclasses.fields(ExperimentConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            if f.name in int_or_none:
                val = int(val)
            elif f.name in float_or_none:
                val = float(val)
            data[f.name] = val
    thresholds = dict(data.get("thresholds", {}))
    for item in args.threshold:
        name, _, value = item.partition("=")
        thresholds[name] = float(value)
    data["thresholds"] = thresholds
    return ExperimentConfig.from_dict(data)


def cmd_gen(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    sample = generate_mixture(args.k, args.d, args.n, args.separation,
                              args.sigma, args.lam, rng)
    write_points(args.out, sample.dataset)
    print(f"wrote {sample.dataset.n} points (d={sample.dataset.d}, "
          f"lambda={sample.dataset.lam}) to {args.out}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    records, ok = harness.run_experiment(config)
    out_dir = config.resolved_out_dir()
    n_ok = sum(1 for r in records if r.get("status") == "ok")
    print(f"{config.pipeline}: {n_ok}/{len(records)} trials ok; "
          f"metrics in {os.path.join(out_dir, 'metrics.jsonl')}")
    if not ok:
        print("threshold or trial failures; see summary.csv", file=sys.stderr)
    return 0 if ok else 1


def cmd_check_coreset(args: argparse.Namespace) -> int:
    data = ingest(args.dataset)
    weighted = ingest(args.coreset)
    if not hasattr(weighted, "weights"):
        raise SystemExit("coreset file must be weighted (header ... weighted)")
    rng = np.random.default_rng(args.seed)
    res = coreset_check(data, weighted, args.trials, rng, k=args.k)
    print(json.dumps({"gamma": res.gamma, "eta": res.eta,
                      "eta_at": res.eta_at, "trials": res.trials,
                      "note": res.note}, sort_keys=True))
    if args.max_gamma is not None and res.gamma > args.max_gamma:
        return 1
    if args.max_eta is not None and res.eta > args.max_eta:
        return 1
    return 0


def cmd_calibrate_lsh(args: argparse.Namespace) -> int:
    params = LshParams.derive(args.r, args.a, args.b, args.n, args.d)
    rng = np.random.default_rng(args.seed)
    rows = []
    for dist in (0.0, args.r / 2, args.r, 2 * args.r, params.c * args.r):
        est = collision_probability_estimate(params, dist, args.trials, rng)
        rows.append((dist, est.probability, est.ci_low, est.ci_high))
    info = {
        "requested": {"a": args.a, "b": args.b, "n": args.n, "r": args.r},
        "achieved": {"c": params.c, "b_eff": params.b_eff,
                     "p_achieved": params.p_achieved, "t_cat": params.t_cat,
                     "q_bound": params.q_bound},
    }
    print(json.dumps(info, sort_keys=True))
    print("distance,probability,ci_low,ci_high")
    for dist, p, lo, hi in rows:
        print(f"{dist},{p},{lo},{hi}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    csv_path, figures = render_report(args.metrics, args.out_dir)
    print(f"report csv: {csv_path}")
    for f in figures:
        print(f"figure: {f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpkm",
                                     description="differentially private k-means toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a planted mixture dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--d", type=int, default=2)
    g.add_argument("--k", type=int, default=2)
    g.add_argument("--lam", type=float, default=1.0)
    g.add_argument("--separation", type=float, default=0.5)
    g.add_argument("--sigma", type=float, default=0.02)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run a pipeline and write metrics")
    _add_config_flags(r)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check-coreset", help="measure a coreset envelope")
    c.add_argument("--dataset", required=True)
    c.add_argument("--coreset", required=True)
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--k", type=int, default=None)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--max-gamma", type=float, default=None)
    c.add_argument("--max-eta", type=float, default=None)
    c.set_defaults(func=cmd_check_coreset)

    l = sub.add_parser("calibrate-lsh", help="achieved hash parameters and collision rates")
    l.add_argument("--n", type=int, required=True)
    l.add_argument("--d", type=int, default=2)
    l.add_argument("--r", type=float, default=0.1)
    l.add_argument("--a", type=float, default=0.2)
    l.add_argument("--b", type=float, default=0.1)
    l.add_argument("--trials", type=int, default=10000)
    l.add_argument("--seed", type=int, default=0)
    l.set_defaults(func=cmd_calibrate_lsh)

    rep = sub.add_parser("report", help="render figures and csv from metrics")
    rep.add_argument("--metrics", required=True)
    rep.add_argument("--out-dir", default=".")
    rep.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
