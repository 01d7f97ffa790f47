import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from dcwp import theory as th
from dcwp.data import BinaryEnvSpec, sample_binary_env

probs = st.floats(0.0, 1.0)


def hoeffding(pi_inv, pi_sp, alpha, c):
    """Independent transcription of the dropout Hoeffding bound."""
    alpha = np.asarray(alpha, dtype=float)
    pi_sp = np.broadcast_to(pi_sp, alpha.shape)
    s = pi_inv + c * sum(a * q for a, q in zip(alpha, pi_sp))
    return 2 * math.exp(-2 * s * s / (4 * sum(a * a for a in alpha) + 1))


class TestLoss:
    def test_invariant_only_classifier_is_perfect(self):
        pi = th.PruneProbabilities.shared(1.0, 0.0, 5)
        est = th.mc_loss(pi, 1.0, np.ones(5), BinaryEnvSpec(0.7, 5), 2000, np.random.default_rng(0))
        assert est.mean == 0.0

    def test_everything_pruned_costs_half(self):
        pi = th.PruneProbabilities.shared(0.0, 0.0, 4)
        est = th.mc_loss(pi, 1.0, np.ones(4), BinaryEnvSpec(0.9, 4), 500, np.random.default_rng(1))
        assert est.mean == 0.5 and est.se == 0.0
        assert th.exact_loss(pi, 1.0, np.ones(4), BinaryEnvSpec(0.9, 4)) == 0.5

    def test_exact_loss_matches_binomial_count(self):
        # all inputs kept, unit ratios: margin = 1 + 2k - 15 with k ~ Bin(15, 0.9)
        D, p = 15, 0.9
        pi = th.PruneProbabilities.shared(1.0, 1.0, D)
        k = np.arange(D + 1)
        margin = 1 + 2 * k - D
        oracle = np.sum(binom.pmf(k, D, p) * np.where(margin < 0, 1.0, np.where(margin == 0, 0.5, 0.0)))
        assert th.exact_loss(pi, 1.0, np.ones(D), BinaryEnvSpec(p, D)) == pytest.approx(oracle, rel=1e-12)

    def test_monte_carlo_agrees_with_enumeration(self):
        D, p = 15, 0.9
        pi = th.PruneProbabilities.shared(1.0, 1.0, D)
        spec = BinaryEnvSpec(p, D)
        exact = th.exact_loss(pi, 1.0, np.ones(D), spec)
        est = th.mc_loss(pi, 1.0, np.ones(D), spec, 100_000, np.random.default_rng(2))
        assert abs(est.mean - exact) < 3 * est.se

    @settings(max_examples=15, deadline=None)
    @given(pi_inv=probs, pi_sp=probs, p=st.floats(0.5, 1.0), seed=st.integers(0, 1000))
    def test_monte_carlo_agrees_with_enumeration_on_partial_masks(self, pi_inv, pi_sp, p, seed):
        D = 5
        rng = np.random.default_rng(seed)
        w_sp = rng.uniform(0.1, 1.5, size=D)
        pi = th.PruneProbabilities.shared(pi_inv, pi_sp, D)
        spec = BinaryEnvSpec(p, D)
        exact = th.exact_loss(pi, 0.8, w_sp, spec)
        n = 20_000
        est = th.mc_loss(pi, 0.8, w_sp, spec, n, rng)
        # events rarer than ~1/n can be absent from the sample, leaving se = 0
        assert abs(est.mean - exact) <= 4 * est.se + 5 / n

    def test_enumeration_limit(self):
        pi = th.PruneProbabilities.shared(0.5, 0.5, 16)
        with pytest.raises(ValueError, match="exceed"):
            th.exact_loss(pi, 1.0, np.ones(16), BinaryEnvSpec(0.9, 16), max_states=1000)

    def test_shape_mismatch(self):
        pi = th.PruneProbabilities.shared(1.0, 1.0, 3)
        with pytest.raises(ValueError):
            th.mc_loss(pi, 1.0, np.ones(4), BinaryEnvSpec(0.9, 3), 10, np.random.default_rng(0))

    def test_probabilities_validated(self):
        with pytest.raises(ValueError):
            th.PruneProbabilities(1.2, [0.5])


class TestBounds:
    def test_test_bound_with_invariant_only(self):
        pi = th.PruneProbabilities.shared(1.0, 0.3, 3)
        assert th.test_bound(pi, np.zeros(3)) == pytest.approx(2 * math.exp(-2), rel=1e-15)

    def test_vacuous_when_everything_pruned(self):
        pi = th.PruneProbabilities.shared(0.0, 0.0, 4)
        assert th.training_bound(pi, np.ones(4), 0.9) == 2.0

    @given(pi_inv=probs, pi_sp=probs, p=st.floats(0.5, 1.0),
           alpha=st.lists(st.floats(-2, 2), min_size=1, max_size=6))
    def test_formulas_match_transcription(self, pi_inv, pi_sp, p, alpha):
        pi = th.PruneProbabilities.shared(pi_inv, pi_sp, len(alpha))
        assert th.training_bound(pi, alpha, p) == pytest.approx(
            hoeffding(pi_inv, pi_sp, alpha, 2 * p - 1), rel=1e-12, abs=1e-300)
        assert th.test_bound(pi, alpha) == pytest.approx(hoeffding(pi_inv, pi_sp, alpha, 0.0), rel=1e-12)

    @given(pi_inv=probs, pi_sp=probs, p=st.floats(0.5, 1.0, exclude_min=True),
           alpha=st.lists(st.floats(0, 3), min_size=1, max_size=15))
    def test_mixture_collapses_to_test_bound(self, pi_inv, pi_sp, p, alpha):
        pi = th.PruneProbabilities.shared(pi_inv, pi_sp, len(alpha))
        phi = 1 - 1 / (2 * p)
        got = th.mixture_bound(pi, alpha, p, phi)
        assert got == pytest.approx(th.test_bound(pi, alpha), rel=1e-12, abs=1e-15)

    @given(p=st.floats(0.55, 1.0), pi_sp=st.floats(0.01, 1.0),
           alpha=st.lists(st.floats(0.01, 2), min_size=1, max_size=8))
    def test_spurious_weights_lower_only_the_training_bound(self, p, pi_sp, alpha):
        pi = th.PruneProbabilities.shared(0.5, pi_sp, len(alpha))
        assert th.training_bound(pi, alpha, p) <= th.test_bound(pi, alpha) + 1e-15

    def test_mixture_at_zero_weight_is_training_bound(self):
        pi = th.PruneProbabilities.shared(0.75, 0.5, 3)
        alpha = [0.2, 0.4, 0.6]
        assert th.mixture_bound(pi, alpha, 0.8, 0.0) == pytest.approx(th.training_bound(pi, alpha, 0.8))

    def test_small_grid_is_valid(self):
        rows = th.bound_grid([0.9], D=15, n=20_000, seed=1, pi_grid=(0.0, 0.5, 1.0),
                             alphas={0.9: np.full(15, 0.3)})
        assert len(rows) == 9
        assert all(r["mc_loss"] <= r["training_bound"] + 3 * r["se"] for r in rows)

    def test_grid_csv(self, tmp_path):
        rows = th.bound_grid([0.75], D=3, n=500, pi_grid=(1.0,), alphas={0.75: np.ones(3)})
        path = th.write_csv(rows, tmp_path / "g.csv")
        with open(path) as f:
            back = list(csv.DictReader(f))
        assert back[0]["phi"] == str(1 - 1 / 1.5)
        assert set(back[0]) >= {"mc_loss", "se", "training_bound", "test_bound", "mixture_bound"}


class TestGradientFlow:
    def test_unbiased_environment_has_closed_form(self):
        # p = 1/2 keeps w_sp at 0 and gives w_inv(t) = log(1 + t)
        tr = th.gradient_flow(0.5, 3, w_inv0=0.0, w_sp0=0.0, horizon=math.e - 1, times=[math.e - 1])
        assert tr.w_inv[-1] == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_array_equal(tr.w_sp, 0.0)

    def test_fixed_point(self):
        tr = th.gradient_flow(0.75, 5, w_inv0=0.5, w_sp0=0.2)
        assert tr.converged
        np.testing.assert_allclose(tr.final.w_sp, 0.5 * math.log(3), atol=1e-3)

    def test_clocks_agree(self):
        times = [0.5, 2.0, 10.0]
        a = th.gradient_flow(0.8, 2, 0.3, 0.1, horizon=10.0, times=times)
        b = th.gradient_flow(0.8, 2, 0.3, 0.1, horizon=10.0, times=times, clock="physical", step=1e-3)
        np.testing.assert_allclose(a.t, times, rtol=1e-12)
        np.testing.assert_allclose(a.w_inv, b.w_inv, atol=1e-8)
        np.testing.assert_allclose(a.w_sp, b.w_sp, atol=1e-8)

    def test_invariant_weight_strictly_increases(self):
        ts = np.geomspace(1e-3, 1e4, 60)
        tr = th.gradient_flow(0.9, 5, 0.1, 0.3, horizon=1e4, times=ts)
        assert np.all(np.diff(tr.w_inv) > 0)

    @pytest.mark.parametrize("p,D", [(0.6, 1), (0.9, 5), (0.75, 15)])
    def test_envelopes_hold(self, p, D):
        w0, s0 = 0.5, 0.5 * th.fixed_point(p)
        end = th.gradient_flow(p, D, w0, s0).final.t
        ts = np.geomspace(1e-3, end, 40)
        tr = th.gradient_flow(p, D, w0, s0, horizon=end, times=ts)
        env = th.analytic_envelopes(p, D, w0, s0, tr.t)
        tol = 1e-9
        assert np.all(env.w_inv_lower <= tr.w_inv + tol)
        assert np.all(tr.w_inv <= env.w_inv_upper + tol)
        assert np.all(env.w_sp_lower <= tr.w_sp + tol)
        assert np.all(env.alpha_lower <= tr.alpha + tol)
        assert np.all(tr.alpha > 0)

    def test_envelopes_at_origin_bracket_initialisation(self):
        env = th.analytic_envelopes(0.75, 3, 0.4, 0.2, [0.0])
        assert env.w_inv_lower[0] == pytest.approx(0.4)
        assert env.w_inv_upper[0] >= 0.4
        assert np.all(env.w_sp_lower[0] <= 0.2 + 1e-12)

    def test_envelopes_reject_boundary_init(self):
        with pytest.raises(ValueError):
            th.analytic_envelopes(0.75, 3, 0.4, 0.0, [1.0])

    def test_rejects_init_beyond_fixed_point(self):
        with pytest.raises(ValueError):
            th.gradient_flow(0.75, 2, 0.1, 1.0)

    def test_physical_clock_needs_horizon(self):
        with pytest.raises(ValueError):
            th.gradient_flow(0.75, 2, clock="physical")

    def test_divergence_reports_time(self):
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(th.FlowDivergenceError) as err:
                th.gradient_flow(0.75, 2, 0.0, 0.0, horizon=1e9, step=1e6, clock="physical")
        assert err.value.t == 0.0

    def test_samples_at_requested_times(self):
        ts = [0.1, 1.0, 7.5]
        tr = th.gradient_flow(0.7, 1, 0.2, 0.1, horizon=8.0, times=ts)
        np.testing.assert_array_equal(tr.t, ts)
        assert tr.final.t == 8.0


class TestWeightRatio:
    def test_ratio_grows_with_bias_and_accuracy_falls(self):
        res = th.weight_ratio_experiment((0.6, 0.99), D=15, epochs=40, seeds=3, n_train=2048,
                                         n_test=4000)
        assert res[0].alpha_mean < res[1].alpha_mean
        assert res[0].unbiased_accuracy > res[1].unbiased_accuracy

    def test_training_is_seeded(self):
        spec = BinaryEnvSpec(0.8, 3)
        a = th.train_linear_bce(spec, [4, 5], n_train=256, epochs=3, batch=64)
        b = th.train_linear_bce(spec, [4, 5], n_train=256, epochs=3, batch=64)
        np.testing.assert_array_equal(a, b)

    def test_adam_variant_decreases_loss(self):
        spec = BinaryEnvSpec(0.8, 3)
        ds = sample_binary_env(spec, 4096, np.random.default_rng(9))
        w = th.train_linear_bce(spec, [1], n_train=1024, epochs=20, batch=128, lr=0.05,
                                optimizer="adam")[0]
        assert th.bce_loss(w, ds.x, ds.y) < math.log(2)

    def test_bce_and_accuracy_helpers(self):
        x = np.array([[1.0, 1.0], [-1.0, 1.0]])
        y = np.array([1, -1])
        assert th.bce_loss(np.zeros(2), x, y) == pytest.approx(math.log(2))
        assert th.linear_accuracy(np.array([1.0, 0.0]), x, y) == 1.0
        assert th.linear_accuracy(np.zeros(2), x, y) == 0.5

    def test_rejects_unbiased_grid_point(self):
        with pytest.raises(ValueError):
            th.weight_ratio_experiment((0.5,), D=2, epochs=1, seeds=1, n_train=16, n_test=16)


class TestMisalignment:
    def test_small_dimension_values(self):
        r = th.misalignment_experiment(3, 0.9, 16, 10_000, np.random.default_rng(0))
        assert r.expected_cross == 0.25
        assert r.expected_within == pytest.approx(0.73)
        assert abs(r.cross_mean - 0.25) < 3 * r.cross_se
        assert abs(r.within_mean - 0.73) < 3 * r.within_se

    def test_unbiased_environment_collapses(self):
        r = th.misalignment_experiment(4, 0.5, 8, 100, np.random.default_rng(1))
        assert r.expected_cross == r.expected_within == pytest.approx(0.2)

    @settings(max_examples=30, deadline=None)
    @given(k=st.integers(1, 20), extra=st.integers(0, 30), seed=st.integers(0, 10**6))
    def test_semi_orthogonal(self, k, extra, seed):
        W = th.semi_orthogonal(k + extra, k, np.random.default_rng(seed))
        np.testing.assert_allclose(W.T @ W, np.eye(k), atol=1e-10)

    def test_too_narrow(self):
        with pytest.raises(ValueError):
            th.semi_orthogonal(3, 4, np.random.default_rng(0))
