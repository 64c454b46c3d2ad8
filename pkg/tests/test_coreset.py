import math

import numpy as np
import pytest

from dpkm.budget import BudgetLedger, PrivacyBudget
from dpkm.core import CenterSet, Dataset, WeightedDataset, cost, weighted_cost
from dpkm.coreset import (Coreset, centralized_coreset, coreset_check,
                          fit_envelope, ldp_coreset, noisy_assignment_weights)
from dpkm.candidates import DiscoveryKnobs
from dpkm.ldp import LdpKnobs, grouphist_error_envelope
from dpkm.harness import generate_mixture
from conftest import rand_ball

DESK = DiscoveryKnobs(threshold_factor=0.05, partition_override=1,
                      min_radius_factor=0.08, max_radius_factor=0.25,
                      iterations_override=1, bucket_diam_factor=1.5,
                      candidate_cap_override=16)
LDP_FAST = LdpKnobs(universe_cap=256, kept_cap=12, tau_factor=0.2,
                    min_radius_factor=0.08, max_radius_factor=0.25)


class TestEnvelope:
    def test_identity_coreset_is_one_zero(self, rng):
        mix = generate_mixture(3, 3, 300, 0.5, 0.05, 1.0, rng)
        ident = WeightedDataset(mix.dataset.points, np.ones(300), 1.0)
        res = coreset_check(mix.dataset, ident, 30, np.random.default_rng(1), k=3)
        assert res.gamma == pytest.approx(1.0, abs=1e-9)
        assert res.eta == pytest.approx(0.0, abs=1e-9)

    def test_doubled_weights_give_gamma_two(self, rng):
        mix = generate_mixture(3, 3, 300, 0.5, 0.05, 1.0, rng)
        doubled = WeightedDataset(mix.dataset.points, 2 * np.ones(300), 1.0)
        res = coreset_check(mix.dataset, doubled, 30, np.random.default_rng(1), k=3)
        assert res.gamma == pytest.approx(2.0, abs=1e-9)
        assert res.eta == pytest.approx(0.0, abs=1e-9)

    def test_both_directions_enforced(self):
        # one center set violating each direction forces gamma or eta up
        cost_s = np.array([10.0, 1.0])
        cost_p = np.array([1.0, 10.0])
        gamma, eta = fit_envelope(cost_s, cost_p)
        assert max(cost_p - gamma * cost_s) <= eta + 1e-12
        assert max(cost_s - gamma * cost_p) <= eta + 1e-12

    def test_fit_on_all_zero_costs(self):
        gamma, eta = fit_envelope(np.zeros(3), np.zeros(3))
        assert (gamma, eta) == (1.0, 0.0)

    def test_check_requires_trials(self, rng):
        mix = generate_mixture(2, 2, 50, 0.5, 0.05, 1.0, rng)
        ident = WeightedDataset(mix.dataset.points, np.ones(50), 1.0)
        with pytest.raises(ValueError):
            coreset_check(mix.dataset, ident, 0, rng)


class TestCentralizedCoreset:
    def test_zero_cost_instance_close_costs(self):
        # k heavy distinct sites, huge budget: coreset cost tracks the true
        # cost within 10% on random center sets
        rng = np.random.default_rng(3)
        sites = np.array([[0.5, 0.0], [-0.5, 0.0]])
        pts = np.repeat(sites, 1500, axis=0)
        S = Dataset(pts, 1.0)
        led = BudgetLedger()
        cs = centralized_coreset(S, 2, 400.0, 1e-5, 0.05, rng,
                                 discovery_knobs=DESK, ledger=led)
        assert led.matches(PrivacyBudget(400.0, 1e-5))
        gen = np.random.default_rng(4)
        for _ in range(100):
            D = CenterSet(rand_ball(2, 2, 1.0, gen))
            cs_cost = weighted_cost(cs.weighted, D)
            true_cost = cost(S, D)
            assert cs_cost == pytest.approx(true_cost, rel=0.1)

    def test_weight_noise_tail(self):
        # |c_hat - c| <= (2/eps_w) ln(2k/beta) for all k cells w.p. >= 1-beta
        rng = np.random.default_rng(8)
        mix = generate_mixture(3, 2, 600, 0.5, 0.02, 1.0, rng)
        centers = CenterSet(mix.true_centers)
        from dpkm.core import assign_labels
        truth = np.bincount(assign_labels(mix.dataset.points, centers),
                            minlength=3).astype(float)
        eps_w, beta = 0.5, 0.05
        bound = (2.0 / eps_w) * math.log(2 * 3 / beta)
        hits = 0
        for _ in range(200):
            w = noisy_assignment_weights(mix.dataset, centers, eps_w, rng)
            hits += bool(np.all(np.abs(w - truth) <= bound))
        assert hits / 200 >= 1 - beta

    def test_infinite_epsilon_weights_exact(self, rng):
        mix = generate_mixture(2, 2, 200, 0.5, 0.02, 1.0, rng)
        centers = CenterSet(mix.true_centers)
        from dpkm.core import assign_labels
        truth = np.bincount(assign_labels(mix.dataset.points, centers),
                            minlength=2).astype(float)
        w = noisy_assignment_weights(mix.dataset, centers, math.inf, rng)
        np.testing.assert_array_equal(w, truth)

    def test_eps_fractions_validated(self, rng):
        mix = generate_mixture(2, 2, 100, 0.5, 0.05, 1.0, rng)
        with pytest.raises(ValueError):
            centralized_coreset(mix.dataset, 2, 1.0, 1e-5, 0.1, rng,
                                eps_fractions=(0.5, 0.2, 0.2))


class TestLdpCoreset:
    def test_one_extra_round_and_budget(self, rng):
        mix = generate_mixture(2, 2, 1500, 0.5, 0.02, 1.0, rng)
        led = BudgetLedger()
        gen = np.random.default_rng(2)
        cs = ldp_coreset(mix.dataset.points, 2, 2.0, 0.1, 0.2, 0.1, gen, 1.0,
                         knobs=LDP_FAST, ledger=led)
        from dpkm.ldp import ldp_k_means
        _, base_transcript = ldp_k_means(mix.dataset.points, 2, 1.0, 0.1, 0.2,
                                         0.1, np.random.default_rng(2), 1.0,
                                         knobs=LDP_FAST)
        assert cs.transcript.round_count == base_transcript.round_count + 1
        assert cs.transcript.per_user_epsilon() == pytest.approx(2.0)
        assert led.matches(PrivacyBudget(2.0))

    def test_single_site_all_mass(self):
        # every client at one point, k=1, big budget: the coreset is that
        # point with weight close to n
        gen = np.random.default_rng(5)
        n = 3000
        pts = np.tile([0.2, -0.4], (n, 1)) + 1e-4 * gen.standard_normal((n, 2))
        knobs = LdpKnobs(universe_cap=256, kept_cap=8, tau_factor=0.2,
                         min_radius_factor=0.08, max_radius_factor=0.25)
        cs = ldp_coreset(pts, 1, 8.0, 0.05, 0.2, 0.1, gen, 1.0, knobs=knobs)
        assert cs.size == 1
        envelope = grouphist_error_envelope(n, 4.0, 0.05)
        assert abs(cs.weighted.weights.sum() - n) <= envelope
        assert np.linalg.norm(cs.weighted.points[0] - [0.2, -0.4]) <= 0.2

    def test_weight_sum_within_group_envelope(self, rng):
        mix = generate_mixture(2, 2, 2000, 0.5, 0.02, 1.0, rng)
        gen = np.random.default_rng(7)
        cs = ldp_coreset(mix.dataset.points, 2, 2.0, 0.1, 0.2, 0.1, gen, 1.0,
                         knobs=LDP_FAST)
        env = grouphist_error_envelope(2000, 1.0, 0.05, group_size=cs.size)
        assert abs(cs.weighted.weights.sum() - 2000) <= env
