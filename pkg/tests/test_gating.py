import numpy as np
import pytest

from vfds.gating import (
    FeatureGroups,
    GateNetParams,
    GatePrior,
    apply_gates,
    gate_probabilities,
    hard_gates_deterministic,
    hard_gates_sampled,
    kl_exact,
    kl_penalty_approx,
    logit,
    prior_prob,
    relaxed_gates,
    sample_logistic,
)
from vfds.tensor import Tensor, finite_difference_check


class TestPriorProb:
    def test_zero_cost_gives_one(self):
        assert prior_prob(0.0, 3.0) == pytest.approx(1.0)

    def test_log_two(self):
        assert prior_prob(1.0, np.log(2.0)) == pytest.approx(0.5)

    def test_scaled_eta(self):
        prior = GatePrior(costs=[1.0], lam=0.01, n_scale=1000)
        assert prior.eta == pytest.approx(10.0)
        assert prior.probs()[0] == pytest.approx(np.exp(-10.0), rel=1e-9)

    def test_negative_cost_rejected(self):
        with pytest.raises(ValueError):
            prior_prob(-1.0, 1.0)


class TestLogisticNoise:
    def test_median_maps_to_zero(self):
        class FakeRng:
            def random(self, shape):
                return np.full(shape, 0.5)

        assert sample_logistic((3,), FakeRng()) == pytest.approx(0.0)

    def test_inverse_transform_at_one(self):
        u = np.e / (1.0 + np.e)
        eps = np.log(u) - np.log1p(-u)
        assert eps == pytest.approx(1.0, rel=1e-12)

    def test_variance_matches_logistic(self):
        rng = np.random.default_rng(42)
        eps = sample_logistic(10**6, rng)
        assert eps.var() == pytest.approx(np.pi**2 / 3.0, rel=0.01)

    def test_always_finite(self):
        rng = np.random.default_rng(7)
        assert np.isfinite(sample_logistic(10**5, rng)).all()


class TestGateProbabilities:
    @staticmethod
    def zero_net(hidden_size=4, n_gates=3, b2=0.0):
        return GateNetParams(
            w1=Tensor(np.zeros((hidden_size, n_gates)), requires_grad=True, dtype=np.float64),
            b1=Tensor(np.zeros(n_gates), requires_grad=True, dtype=np.float64),
            w2=Tensor(np.zeros((n_gates, n_gates)), requires_grad=True, dtype=np.float64),
            b2=Tensor(np.full(n_gates, b2), requires_grad=True, dtype=np.float64),
        )

    def test_all_zero_weights_give_half(self):
        net = self.zero_net()
        h = Tensor(np.ones((2, 4)), dtype=np.float64)
        np.testing.assert_allclose(gate_probabilities(net, h).data, 0.5)

    def test_bias_two_gives_sigmoid_two(self):
        net = self.zero_net(b2=2.0)
        h = Tensor(np.zeros((1, 4)), dtype=np.float64)
        np.testing.assert_allclose(
            gate_probabilities(net, h).data, 1.0 / (1.0 + np.exp(-2.0)), rtol=1e-6
        )

    def test_grad_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        net = GateNetParams(
            w1=Tensor(rng.normal(0, 0.5, (4, 3)), requires_grad=True, dtype=np.float64),
            b1=Tensor(rng.normal(0, 0.1, 3), requires_grad=True, dtype=np.float64),
            w2=Tensor(rng.normal(0, 0.5, (3, 3)), requires_grad=True, dtype=np.float64),
            b2=Tensor(rng.normal(0, 0.1, 3), requires_grad=True, dtype=np.float64),
        )
        h = Tensor(rng.normal(0, 1, (2, 4)), dtype=np.float64)
        params = list(net.parameters().values())

        def f(ps):
            return gate_probabilities(net, h).sum()

        assert finite_difference_check(f, params, eps=1e-4) < 1e-5


class TestRelaxedGates:
    def test_symmetric_point(self):
        for tau in (0.05, 1.0, 100.0):
            assert relaxed_gates(0.5, 0.0, tau) == pytest.approx(0.5)

    def test_tau_one_zero_noise_is_identity(self):
        sigma = np.array([0.1, 0.37, 0.8])
        np.testing.assert_allclose(relaxed_gates(sigma, 0.0, 1.0), sigma, rtol=1e-9)

    def test_sharp_temperature(self):
        val = relaxed_gates(0.6, 0.0, 0.05)
        expected = 1.0 / (1.0 + np.exp(-np.log(1.5) / 0.05))
        assert val == pytest.approx(expected, rel=1e-9)
        assert val > 0.999

    def test_nonpositive_tau_rejected(self):
        with pytest.raises(ValueError):
            relaxed_gates(0.5, 0.0, 0.0)

    def test_high_tau_collapses_to_half(self):
        rng = np.random.default_rng(0)
        sigma = rng.uniform(0.05, 0.95, 200)
        eps = rng.uniform(-4, 4, 200) - logit(sigma)  # keep |logit+eps| <= 4
        z = relaxed_gates(sigma, eps, 100.0)
        assert np.abs(z - 0.5).max() < 0.02

    def test_low_tau_is_nearly_binary(self):
        rng = np.random.default_rng(1)
        sigma = rng.uniform(0.05, 0.95, 500)
        eps = rng.standard_normal(500) * 2
        pre = logit(sigma) + eps
        keep = np.abs(pre) > 0.1
        z = relaxed_gates(sigma, eps, 0.01)[keep]
        assert np.minimum(z, 1.0 - z).max() < 1e-3


class TestHardGates:
    def test_zero_noise_thresholds_sigma(self):
        assert hard_gates_sampled(0.7, 0.0) == 1.0
        assert hard_gates_sampled(0.3, 0.0) == 0.0

    def test_mean_over_noise_equals_sigma(self):
        rng = np.random.default_rng(123)
        m = 10**6
        for sigma in (0.1, 0.37, 0.5, 0.9):
            eps = sample_logistic(m, rng)
            rate = hard_gates_sampled(np.full(m, sigma), eps).mean()
            bound = 3.0 * np.sqrt(sigma * (1.0 - sigma) / m)
            assert abs(rate - sigma) < bound

    def test_relaxed_thresholded_matches_hard_at_low_tau(self):
        rng = np.random.default_rng(5)
        sigma = rng.uniform(0.05, 0.95, 2000)
        eps = sample_logistic(2000, rng)
        hard = hard_gates_sampled(sigma, eps)
        soft = relaxed_gates(sigma, eps, 0.01)
        np.testing.assert_array_equal((soft > 0.5).astype(np.float32), hard)

    def test_deterministic_threshold(self):
        np.testing.assert_array_equal(
            hard_gates_deterministic([0.9, 0.1, 0.5]), [1.0, 0.0, 0.0]
        )

    def test_threshold_depends_only_on_logit_sign(self):
        rng = np.random.default_rng(6)
        sigma = rng.uniform(0.01, 0.99, 100)
        # squashing toward 1/2 preserves the sign of the logit
        squashed = 0.5 + 0.2 * (sigma - 0.5)
        np.testing.assert_array_equal(
            hard_gates_deterministic(sigma), hard_gates_deterministic(squashed)
        )


class TestApplyGates:
    def test_all_open_is_identity(self):
        g = FeatureGroups.identity(3)
        x = np.arange(6, dtype=np.float32).reshape(2, 3)
        np.testing.assert_array_equal(apply_gates(x, np.ones(3), g), x)

    def test_single_group_zero_clears_everything(self):
        g = FeatureGroups([[0, 1, 2]], 3)
        x = np.ones((2, 3), dtype=np.float32)
        np.testing.assert_array_equal(apply_gates(x, np.zeros(1), g), np.zeros((2, 3)))

    def test_relaxed_gate_halves_grouped_columns(self):
        g = FeatureGroups([[0, 2], [1]], 3)
        x = np.ones((1, 3), dtype=np.float32)
        out = apply_gates(x, np.array([0.5, 1.0]), g)
        np.testing.assert_allclose(out, [[0.5, 1.0, 0.5]])

    def test_group_validation(self):
        with pytest.raises(ValueError):
            FeatureGroups([[0, 1], [1, 2]], 3)  # overlap
        with pytest.raises(ValueError):
            FeatureGroups([[0, 1]], 3)  # gap
        with pytest.raises(ValueError):
            FeatureGroups([[0, 3]], 3)  # out of range


class TestKl:
    def test_penalty_arithmetic(self):
        prior = GatePrior(costs=[1.0, 1.0], lam=1.0)
        assert kl_penalty_approx([0.2, 0.8], prior) == pytest.approx(1.0)

    def test_penalty_vanishes_with_sigma(self):
        prior = GatePrior(costs=[1.0, 2.0], lam=0.5)
        assert kl_penalty_approx([0.0, 0.0], prior) == 0.0

    def test_exact_kl_zero_for_matching(self):
        prior = GatePrior(costs=[np.log(2.0)], lam=1.0)  # p = 0.5
        assert kl_exact([0.5], prior) == pytest.approx(0.0, abs=1e-12)

    def test_exact_kl_hand_value(self):
        prior = GatePrior(costs=[np.log(2.0)], lam=1.0)  # p = 0.5
        expected = 0.9 * np.log(1.8) + 0.1 * np.log(0.2)
        assert kl_exact([0.9], prior) == pytest.approx(expected, rel=1e-9)

    def test_exact_kl_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            sigma = rng.uniform(0.01, 0.99)
            cost = rng.uniform(0.05, 3.0)
            lam = rng.uniform(0.05, 2.0)
            assert kl_exact([sigma], GatePrior(costs=[cost], lam=lam)) >= -1e-12

    def test_degenerate_prior_rejected(self):
        with pytest.raises(ValueError):
            kl_exact([0.5], GatePrior(costs=[0.0], lam=1.0))  # p = 1

    def test_scaled_exact_kl_converges_to_penalty(self):
        """(1/N) KL_exact with eta = N lam approaches lam * c * sigma."""
        lam, cost, n = 0.01, 1.0, 10**6
        for sigma in np.arange(0.1, 0.95, 0.1):
            prior = GatePrior(costs=[cost], lam=lam, n_scale=n)
            scaled = kl_exact([sigma], prior) / n
            target = lam * cost * sigma
            assert abs(scaled - target) / target < 0.01

    def test_penalty_monotone_in_sigma_and_cost(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            sigma = rng.uniform(0.05, 0.9, 3)
            costs = rng.uniform(0.1, 2.0, 3)
            lam = 0.3
            base = kl_penalty_approx(sigma, GatePrior(costs=costs, lam=lam))
            k = rng.integers(0, 3)
            up_s = sigma.copy()
            up_s[k] += 0.05
            up_c = costs.copy()
            up_c[k] += 0.1
            assert kl_penalty_approx(up_s, GatePrior(costs=costs, lam=lam)) > base
            assert kl_penalty_approx(sigma, GatePrior(costs=up_c, lam=lam)) > base
