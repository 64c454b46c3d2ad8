import json
import math
import os

import numpy as np
import pytest

from dpkm.core import Dataset, WeightedDataset
from dpkm.harness import (ExperimentConfig, check_thresholds, generate_mixture,
                          ingest, label_purity, run_experiment, summarize,
                          write_points)

DESK = dict(threshold_factor=0.05, partition_override=1, min_radius_factor=0.08,
            max_radius_factor=0.25, iterations_override=1, bucket_diam_factor=1.5,
            candidate_cap_override=16)
LDP = dict(universe_cap=256, kept_cap=12, tau_factor=0.2,
           min_radius_factor=0.08, max_radius_factor=0.25)


class TestGenerateMixture:
    def test_sigma_zero_sits_on_sites(self, rng):
        mix = generate_mixture(3, 2, 50, 0.4, 0.0, 1.0, rng)
        for p, label in zip(mix.dataset.points, mix.labels):
            assert np.allclose(p, mix.true_centers[label])

    def test_all_points_inside_ball(self, rng):
        mix = generate_mixture(4, 3, 500, 0.3, 0.3, 2.0, rng)
        assert np.linalg.norm(mix.dataset.points, axis=1).max() <= 2.0 + 1e-12

    def test_separation_enforced(self, rng):
        mix = generate_mixture(4, 3, 10, 0.5, 0.01, 1.0, rng)
        C = mix.true_centers
        for i in range(4):
            for j in range(i + 1, 4):
                assert np.linalg.norm(C[i] - C[j]) >= 0.5

    def test_infeasible_separation_raises(self, rng):
        with pytest.raises(ValueError, match="separation"):
            generate_mixture(40, 1, 10, 1.5, 0.01, 1.0, rng)

    def test_purity_metric(self):
        assert label_purity(np.array([0, 0, 1, 1]), np.array([1, 1, 0, 0])) == 1.0
        assert label_purity(np.array([0, 1, 0, 1]), np.array([0, 0, 0, 0])) == 0.5


class TestPointFiles:
    def test_round_trip(self, tmp_path, rng):
        mix = generate_mixture(2, 3, 40, 0.5, 0.05, 1.5, rng)
        path = tmp_path / "pts.dpkm"
        write_points(path, mix.dataset)
        back = ingest(path)
        assert isinstance(back, Dataset)
        np.testing.assert_array_equal(back.points, mix.dataset.points)
        assert back.lam == 1.5

    def test_weighted_round_trip(self, tmp_path, rng):
        w = WeightedDataset(rng.uniform(-0.5, 0.5, (10, 2)),
                            rng.uniform(-2, 5, 10), 1.0)
        path = tmp_path / "w.dpkm"
        write_points(path, w)
        back = ingest(path)
        assert isinstance(back, WeightedDataset)
        np.testing.assert_array_equal(back.points, w.points)
        np.testing.assert_array_equal(back.weights, w.weights)

    def test_header_and_dimension_errors(self, tmp_path):
        bad = tmp_path / "bad.dpkm"
        bad.write_text("nope v1 d=2 lambda=1.0\n0.0,0.0\n")
        with pytest.raises(ValueError, match="bad header"):
            ingest(bad)
        mism = tmp_path / "mism.dpkm"
        mism.write_text("dpkm v1 d=3 lambda=1.0\n0.0,0.0\n")
        with pytest.raises(ValueError, match="expected 3 values"):
            ingest(mism)

    def test_parse_error_names_line(self, tmp_path):
        f = tmp_path / "parse.dpkm"
        f.write_text("dpkm v1 d=1 lambda=1.0\n0.5\nxyz\n")
        with pytest.raises(ValueError, match="parse.dpkm:3"):
            ingest(f)

    def test_norm_violation_reject_and_rescale(self, tmp_path):
        f = tmp_path / "norm.dpkm"
        f.write_text("dpkm v1 d=2 lambda=1.0\n0.5,0.0\n3.0,4.0\n")
        with pytest.raises(ValueError, match="norm"):
            ingest(f)
        data = ingest(f, norm_policy="rescale")
        assert np.linalg.norm(data.points, axis=1).max() <= 1.0 + 1e-12


class TestConfig:
    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown config"):
            ExperimentConfig.from_dict({"bogus": 1})

    def test_validation(self):
        cfg = ExperimentConfig(a=0.1, b=0.2)
        with pytest.raises(ValueError):
            cfg.validate()

    def test_env_var_output_dir(self, monkeypatch):
        monkeypatch.setenv("DPKM_OUT", "/tmp/xyz")
        assert ExperimentConfig().resolved_out_dir() == "/tmp/xyz"
        assert ExperimentConfig(out_dir="/a").resolved_out_dir() == "/a"

    def test_json_round_trip(self):
        cfg = ExperimentConfig(pipeline="ldp", n=123, thresholds={"max_rounds": 4})
        back = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
        assert back == cfg


class TestThresholds:
    def test_max_and_min(self):
        summary = {"cost_ratio": 10.0, "rounds": 3}
        checks = check_thresholds(summary, {"max_cost_ratio": 25.0,
                                            "min_rounds": 2})
        assert all(c["passed"] for c in checks)
        checks = check_thresholds(summary, {"max_cost_ratio": 5.0})
        assert not checks[0]["passed"]
        with pytest.raises(ValueError):
            check_thresholds(summary, {"weird": 1.0})


class TestRunExperiment:
    def test_centralized_writes_outputs(self, tmp_path):
        cfg = ExperimentConfig(pipeline="centralized", n=2500, d=2, k=2,
                               epsilon=1.0, trials=2, seed=3,
                               out_dir=str(tmp_path),
                               thresholds={"max_median_cost_ratio": 50.0}, **DESK)
        records, ok = run_experiment(cfg)
        assert ok
        assert all(r["status"] == "ok" for r in records)
        assert (tmp_path / "metrics.jsonl").exists()
        assert (tmp_path / "summary.csv").exists()
        assert (tmp_path / "timings.jsonl").exists()
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[0])
        assert rec["budget_ok"]
        assert set(rec["released"]) <= {"private_cost", "candidate_count", "centers"}

    def test_byte_identical_reruns(self, tmp_path):
        outs = []
        for sub in ("a", "b"):
            cfg = ExperimentConfig(pipeline="ldp", n=600, d=2, k=2, epsilon=2.0,
                                   trials=2, seed=9, out_dir=str(tmp_path / sub),
                                   **LDP)
            run_experiment(cfg)
            outs.append({
                "metrics": (tmp_path / sub / "metrics.jsonl").read_bytes(),
                "summary": (tmp_path / sub / "summary.csv").read_bytes(),
                "t0": (tmp_path / sub / "transcript-0.ndjson").read_bytes(),
                "t1": (tmp_path / sub / "transcript-1.ndjson").read_bytes(),
            })
        assert outs[0] == outs[1]

    def test_ledger_totals_in_records(self, tmp_path):
        cfg = ExperimentConfig(pipeline="coreset", coreset_model="ldp", n=900,
                               d=2, k=2, epsilon=2.0, trials=1, seed=0,
                               out_dir=str(tmp_path), **LDP)
        records, _ = run_experiment(cfg)
        rec = records[0]
        assert rec["eps_spent"] == pytest.approx(2.0)
        assert rec["budget_ok"]
        assert rec["rounds"] == 4

    def test_failed_threshold_gives_not_ok(self, tmp_path):
        cfg = ExperimentConfig(pipeline="centralized", n=2500, d=2, k=2,
                               epsilon=1.0, trials=1, seed=3,
                               out_dir=str(tmp_path),
                               thresholds={"max_median_cost_ratio": 1e-9}, **DESK)
        _, ok = run_experiment(cfg)
        assert not ok

    def test_summarize(self):
        recs = [{"status": "ok", "cost_ratio": 2.0, "eps_spent": 1.0,
                 "budget_ok": True, "rounds": 3},
                {"status": "ok", "cost_ratio": 4.0, "eps_spent": 1.0,
                 "budget_ok": True, "rounds": 3}]
        s = summarize(recs)
        assert s["median_cost_ratio"] == 3.0
        assert s["rounds"] == 3
        assert s["budget_ok"]
