import inspect
import io
import math

import numpy as np
import pytest

import dpkm.ldp as ldp_mod
from dpkm.budget import BudgetLedger, PrivacyBudget
from dpkm.core import CenterSet, Dataset, WeightedDataset, cost, weighted_cost, \
    opt_over_candidates, assign_labels
from dpkm.harness import generate_mixture
from dpkm.ldp import (LdpKnobs, LdpTranscript, PublicRandomness,
                      client_grouphist_bits, grouphist_aggregate,
                      grouphist_error_envelope, grouphist_group_query,
                      grouphist_randomize, ldp_good_center, ldp_k_means,
                      ldp_k_means_detailed, pack_array, rr_debias_scale)
from dpkm.selection import CostOracle, noisy_local_search
from conftest import rand_ball

FAST_KNOBS = LdpKnobs(universe_cap=256, kept_cap=12, tau_factor=0.2,
                      min_radius_factor=0.08, max_radius_factor=0.25)


class TestPublicRandomness:
    def test_reproducible_from_seed(self):
        a = PublicRandomness(7, 5, 20).matrix()
        b = PublicRandomness(7, 5, 20).matrix()
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {-1, 1}

    def test_entry_matches_matrix(self):
        Z = PublicRandomness(3, 4, 10)
        M = Z.matrix()
        assert Z.entry(2, 5) == M[2, 5]
        with pytest.raises(IndexError):
            Z.entry(4, 0)

    def test_kwise_mode_reproducible_and_balanced(self):
        Z = PublicRandomness(11, 8, 500, mode="kwise")
        M1, M2 = Z.matrix(), PublicRandomness(11, 8, 500, mode="kwise").matrix()
        np.testing.assert_array_equal(M1, M2)
        assert abs(M1.mean()) < 0.1

    def test_entries_for_users(self):
        Z = PublicRandomness(5, 6, 30)
        y = np.random.default_rng(0).integers(0, 6, 30)
        np.testing.assert_array_equal(Z.entries_for_users(y),
                                      Z.matrix()[y, np.arange(30)])


class TestGroupHist:
    def test_randomize_huge_epsilon_echoes_matrix(self, rng):
        Z = PublicRandomness(1, 4, 10)
        for i in range(10):
            assert grouphist_randomize(2, i, Z, 50.0, rng) == Z.entry(2, i)

    def test_randomizer_privacy_table(self):
        # for any fixed (i, Z) the two-row output table has ratio e^eps
        keep = math.exp(1.0) / (math.exp(1.0) + 1.0)
        table = {(+1, +1): keep, (+1, -1): 1 - keep,
                 (-1, +1): 1 - keep, (-1, -1): keep}
        for out in (+1, -1):
            ratio = table[(+1, out)] / table[(-1, out)]
            assert max(ratio, 1 / ratio) == pytest.approx(math.e, rel=1e-12)

    def test_single_user_debias(self):
        # n=1, huge eps: the holder's estimate is ~1, other rows average 0
        Z = PublicRandomness(9, 3, 1)
        bits = client_grouphist_bits(np.array([1]), Z, 50.0, np.random.default_rng(0))
        fhat = grouphist_aggregate(bits, Z, 50.0)
        assert fhat[1] == pytest.approx(1.0, rel=1e-9)
        # other rows are +-1 times the scale: mean zero over Z draws
        others = []
        for seed in range(200):
            Zs = PublicRandomness(seed, 3, 1)
            b = client_grouphist_bits(np.array([1]), Zs, 50.0,
                                      np.random.default_rng(seed))
            others.append(grouphist_aggregate(b, Zs, 50.0)[0])
        assert abs(np.mean(others)) < 0.25

    def test_unbiasedness_monte_carlo(self):
        n, s, eps = 1000, 6, 1.0
        y = np.zeros(n, dtype=np.int64)
        y[:300] = 2
        rng = np.random.default_rng(77)
        est = []
        for _ in range(500):
            Z = PublicRandomness(int(rng.integers(2**62)), s, n)
            bits = client_grouphist_bits(y, Z, eps, rng)
            est.append(grouphist_aggregate(bits, Z, eps)[2])
        est = np.array(est)
        se = est.std(ddof=1) / math.sqrt(len(est))
        assert abs(est.mean() - 300.0) <= 3 * se

    def test_hoeffding_envelope(self):
        n, s, eps, beta = 10**4, 4, 1.0, 0.05
        counts = np.array([300, 0, 0, n - 300])
        y = np.repeat(np.arange(s), counts)
        env = grouphist_error_envelope(n, eps, beta)
        rng = np.random.default_rng(99)
        hits = 0
        for _ in range(100):
            Z = PublicRandomness(int(rng.integers(2**62)), s, n)
            bits = client_grouphist_bits(y, Z, eps, rng)
            fhat = grouphist_aggregate(bits, Z, eps)
            hits += bool(np.all(np.abs(fhat - counts) <= env))
        assert hits >= 93

    def test_group_query(self):
        fhat = np.array([10.0, -2.0, 5.0, 7.0])
        assert grouphist_group_query(fhat, [], []) == 0.0
        assert grouphist_group_query(fhat, [2], [1.0]) == 5.0
        total = grouphist_group_query(fhat, np.arange(4), np.ones(4))
        assert total == pytest.approx(fhat.sum())
        with pytest.raises(ValueError):
            grouphist_group_query(fhat, [0], [1.5])

    def test_full_domain_query_near_n(self):
        n, s = 2000, 8
        y = np.random.default_rng(1).integers(0, s, n)
        Z = PublicRandomness(13, s, n)
        bits = client_grouphist_bits(y, Z, 1.0, np.random.default_rng(2))
        fhat = grouphist_aggregate(bits, Z, 1.0)
        total = grouphist_group_query(fhat, np.arange(s), np.ones(s))
        assert abs(total - n) <= grouphist_error_envelope(n, 1.0, 0.01, group_size=s)

    def test_aggregate_requires_one_report_per_user(self):
        Z = PublicRandomness(0, 3, 5)
        with pytest.raises(ValueError):
            grouphist_aggregate(np.ones(4, dtype=np.int8), Z, 1.0)


class TestTranscript:
    def test_serialization_round_trip_deterministic(self, rng):
        mix = generate_mixture(2, 2, 400, 0.5, 0.05, 1.0, rng)
        outs = []
        for _ in range(2):
            gen = np.random.default_rng(123)
            _, transcript = ldp_k_means(mix.dataset.points, 2, 4.0, 0.1, 0.2,
                                        0.1, gen, 1.0, knobs=FAST_KNOBS)
            buf = io.StringIO()
            transcript.serialize(buf)
            outs.append(buf.getvalue())
        assert outs[0] == outs[1]
        first = outs[0].splitlines()[0]
        assert '"round": 1' in first and '"dir": "s2c"' in first and '"user": -1' in first

    def test_message_counts(self, rng):
        mix = generate_mixture(2, 2, 200, 0.5, 0.05, 1.0, rng)
        _, transcript = ldp_k_means(mix.dataset.points, 2, 4.0, 0.1, 0.2, 0.1,
                                    np.random.default_rng(3), 1.0, knobs=FAST_KNOBS)
        msgs = list(transcript.messages())
        n_rounds = transcript.round_count
        # one broadcast plus one report per user per round
        assert len(msgs) == n_rounds * (1 + 200)

    def test_pack_array_little_endian(self):
        blob = pack_array(np.array([1, 2], dtype=np.int64))
        assert blob[0:1] == b"i"
        assert int.from_bytes(blob[1:9], "little") == 8


class TestGoodCenter:
    def test_two_rounds_and_caps(self, rng):
        mix = generate_mixture(2, 2, 2000, 0.5, 0.02, 1.0, rng)
        transcript = LdpTranscript()
        led = BudgetLedger()
        Y = ldp_good_center(mix.dataset.points, 1.0, 2.0, 0.1, 0.2, 0.1,
                            np.random.default_rng(0), knobs=FAST_KNOBS,
                            transcript=transcript, ledger=led)
        assert transcript.round_count == 2
        assert transcript.per_user_epsilon() == pytest.approx(2.0)
        assert led.matches(PrivacyBudget(2.0))
        cap = min(math.ceil(2.0 * 2000 ** (1 / 3 + 0.2)), FAST_KNOBS.kept_cap)
        assert 0 < Y.size <= cap

    def test_planted_cluster_recovered(self):
        # quarter of the users in a tight cluster: a candidate lands near its
        # centroid (well inside the advertised 5c*diam + slack radius)
        hits = 0
        for seed in range(10):
            gen = np.random.default_rng(seed)
            n = 20000
            center = np.array([0.45, -0.3])
            cluster = center + 0.003 * gen.standard_normal((n // 4, 2))
            rest = rand_ball(3 * n // 4, 2, 1.0, gen)
            clients = np.vstack([cluster, rest])
            knobs = LdpKnobs(universe_cap=1024, kept_cap=12, tau_factor=0.5,
                             tau_frac=0.1, min_radius_factor=0.08,
                             max_radius_factor=0.25)
            Y = ldp_good_center(clients, 1.0, 4.0, 0.1, 0.2, 0.1, gen, knobs=knobs)
            if Y.size and np.linalg.norm(Y.centers - center, axis=1).min() <= 0.25:
                hits += 1
        assert hits >= 9

    def test_empty_when_threshold_unreachable(self, rng):
        clients = rand_ball(500, 2, 1.0, rng)
        knobs = LdpKnobs(universe_cap=256, kept_cap=8, tau_factor=50.0,
                         min_radius_factor=0.08, max_radius_factor=0.25)
        transcript = LdpTranscript()
        Y = ldp_good_center(clients, 1.0, 1.0, 0.1, 0.2, 0.1, rng,
                            knobs=knobs, transcript=transcript)
        assert Y.size == 0
        assert transcript.round_count == 2  # protocol structure unchanged


class TestLdpKMeans:
    def test_rounds_and_per_user_budget(self, rng):
        mix = generate_mixture(2, 2, 1500, 0.5, 0.02, 1.0, rng)
        led = BudgetLedger()
        centers, transcript = ldp_k_means(mix.dataset.points, 2, 2.0, 0.1, 0.2,
                                          0.1, np.random.default_rng(1), 1.0,
                                          knobs=FAST_KNOBS, ledger=led)
        assert centers.k == 2
        assert transcript.round_count <= 4
        assert transcript.per_user_epsilon() <= 2.0 + 1e-9
        assert led.matches(PrivacyBudget(2.0))

    def test_weighted_view_inequalities(self, rng):
        # server-side test view: the weighted candidate costs bracket the
        # true costs via the triangle inequality, checked exactly
        for _ in range(25):
            n = int(rng.integers(10, 41))
            m = int(rng.integers(2, 9))
            k = int(rng.integers(1, 4))
            S = Dataset(rand_ball(n, 2, 1.0, rng), 1.0)
            Y = rand_ball(m, 2, 1.0, rng)
            _, best = opt_over_candidates(S, Y, min(k, m))
            labels = assign_labels(S.points, CenterSet(Y))
            B = WeightedDataset(Y, np.bincount(labels, minlength=m).astype(float), 1.0)
            for _ in range(2):
                D = CenterSet(rand_ball(k, 2, 1.0, rng))
                cb, cs = weighted_cost(B, D), cost(S, D)
                slack = 1e-9 * max(1.0, cb, cs, best)
                assert cb <= 3 * best + 3 * cs + slack
                assert cs <= 3 * best + 3 * cb + slack

    def test_handles_negative_weights(self, rng):
        # the swap search over estimated weights must tolerate negatives
        Y = rand_ball(6, 2, 1.0, rng)
        weights = np.array([120.0, -15.0, 80.0, -3.0, 40.0, 9.0])
        B = WeightedDataset(Y, weights, 1.0)
        oracle = CostOracle.weighted(B, Y, slack=5.0)
        D = noisy_local_search(oracle, Y, 2, 100, 1.0)
        assert D.centers.shape == (2, 2)

    def test_oracle_slack_recorded(self, rng):
        mix = generate_mixture(2, 2, 1200, 0.5, 0.02, 1.0, rng)
        res = ldp_k_means_detailed(mix.dataset.points, 2, 2.0, 0.1, 0.2, 0.1,
                                   np.random.default_rng(5), 1.0, knobs=FAST_KNOBS)
        n, s = 1200, res.candidates.size
        expect = FAST_KNOBS.oracle_slack_const * math.sqrt(s * n * math.log(n / 0.1))
        assert res.oracle_slack == pytest.approx(expect, rel=1e-9)

    def test_candidates_visible_in_broadcast(self, rng):
        mix = generate_mixture(2, 2, 900, 0.5, 0.02, 1.0, rng)
        res = ldp_k_means_detailed(mix.dataset.points, 2, 2.0, 0.1, 0.2, 0.1,
                                   np.random.default_rng(6), 1.0, knobs=FAST_KNOBS)
        bc = res.transcript.broadcast_of("k-means/weights")
        np.testing.assert_array_equal(bc["candidates"], res.candidates.centers)


class TestServerClientBoundary:
    def test_server_functions_never_take_raw_points(self):
        server_fns = [f for name, f in inspect.getmembers(ldp_mod, inspect.isfunction)
                      if name.startswith("server_")]
        assert server_fns, "server-side functions should exist"
        for fn in server_fns:
            params = set(inspect.signature(fn).parameters)
            assert not params & {"points", "clients", "dataset"}, fn.__name__

    def test_reports_are_randomized_payloads(self, rng):
        mix = generate_mixture(2, 2, 300, 0.5, 0.05, 1.0, rng)
        _, transcript = ldp_k_means(mix.dataset.points, 2, 2.0, 0.1, 0.2, 0.1,
                                    np.random.default_rng(9), 1.0, knobs=FAST_KNOBS)
        tags = [r.tag for r in transcript.rounds]
        assert tags[0] == "good-center/frequency"
        bits = transcript.rounds[0].reports
        assert set(np.unique(bits)) <= {-1, 1}
        coords = transcript.rounds[1].reports
        # dummy reports everywhere: every user sends the same-shape payload
        assert coords.shape[0] == 300
