import numpy as np
import pytest

from capm.bounds import compute_bounds
from capm.dual import dual_bound
from capm.errors import DimensionTooLarge, ShapeMismatch
from capm.generate import random_network
from capm.network import FcLayer, FlattenLayer, NetworkSpec, network_forward
from capm.oracle import (
    bound_gap_report,
    brute_force_min,
    empirical_bounds,
    interval_bounds,
    iter_polytope,
    linear_layer_exact,
    predicted_intervals,
    sample_polytope,
    trace_forward,
)


def linear_net(W, b):
    """Single layer ``y = W^T z + b`` with ``W`` shaped (n_in, n_out)."""
    W = np.asarray(W, dtype=float)
    return NetworkSpec([FlattenLayer(), FcLayer(W.T, b)], (1, 1, W.shape[0]))


class TestSampling:
    def test_samples_stay_in_box(self, rng):
        x = rng.normal(size=(2, 3, 3))
        eps = rng.uniform(0, 0.3, x.shape)
        s = sample_polytope(x, eps, 500, seed=3).samples
        assert s.shape == (500, 2, 3, 3)
        assert np.all(s >= x - eps) and np.all(s <= x + eps)

    def test_zero_epsilon(self, rng):
        x = rng.normal(size=(1, 2, 2))
        np.testing.assert_array_equal(sample_polytope(x, 0.0, 10, 0).samples, np.broadcast_to(x, (10, 1, 2, 2)))

    def test_reproducible_and_chunk_independent(self, rng):
        x = rng.normal(size=(1, 4, 4))
        a = sample_polytope(x, 0.1, 1000, 42).samples
        np.testing.assert_array_equal(a, sample_polytope(x, 0.1, 1000, 42).samples)
        np.testing.assert_array_equal(a, np.concatenate(list(iter_polytope(x, 0.1, 1000, 42, chunk=77))))
        assert not np.array_equal(a, sample_polytope(x, 0.1, 1000, 43).samples)

    def test_needs_a_sample(self):
        with pytest.raises(ValueError):
            sample_polytope(np.zeros((1, 1, 1)), 0.1, 0, 0)


class TestEmpirical:
    def test_single_sample(self, small_nets, rng):
        net = small_nets[0]
        z = rng.normal(size=(1,) + net.input_shape)
        emp = empirical_bounds(net, z)
        for key, values in trace_forward(net, z).items():
            np.testing.assert_array_equal(emp.lower[key], values[0])
            np.testing.assert_array_equal(emp.upper[key], values[0])

    def test_identity_layer(self, rng):
        net = linear_net(np.eye(3), np.zeros(3))
        s = sample_polytope(np.zeros((1, 1, 3)), 1.0, 200, 1).samples
        emp = empirical_bounds(net, s)
        np.testing.assert_array_equal(emp.lower[("preact", 1)], s.reshape(200, 3).min(axis=0))
        np.testing.assert_array_equal(emp.upper[("preact", 1)], s.reshape(200, 3).max(axis=0))

    def test_more_samples_never_shrink(self, small_nets, rng):
        net = small_nets[4]
        x = rng.normal(size=net.input_shape)
        few = empirical_bounds(net, sample_polytope(x, 0.1, 100, 5).samples)
        many = empirical_bounds(net, iter_polytope(x, 0.1, 2000, 5, chunk=100))
        for key in few.lower:
            assert np.all(many.lower[key] <= few.lower[key]) and np.all(many.upper[key] >= few.upper[key])


class TestGapReport:
    def test_perfect_prediction(self, small_nets, rng):
        net = small_nets[1]
        emp = empirical_bounds(net, sample_polytope(rng.normal(size=net.input_shape), 0.1, 300, 0).samples)
        predicted = {k: (emp.lower[k], emp.upper[k]) for k in emp.lower}
        report = bound_gap_report(predicted, emp)
        assert report.sound and all(r.mean_difference == 0 for r in report.rows)

    def test_sound_predictions_are_non_negative(self, small_nets, rng):
        net = small_nets[2]
        x = rng.normal(size=net.input_shape)
        emp = empirical_bounds(net, sample_polytope(x, 0.1, 2000, 0).samples)
        report = bound_gap_report(predicted_intervals(net, compute_bounds(net, x, 0.1)), emp)
        assert report.sound and all(r.min_difference >= 0 for r in report.rows)

    def test_corrupted_prediction_is_flagged(self, small_nets, rng):
        net = small_nets[2]
        x = rng.normal(size=net.input_shape)
        emp = empirical_bounds(net, sample_polytope(x, 0.1, 500, 0).samples)
        predicted = predicted_intervals(net, compute_bounds(net, x, 0.1))
        key = ("preact", max(k[1] for k in predicted if k[0] == "preact"))
        l, u = predicted[key]
        predicted[key] = (l, emp.upper[key] - 0.5 * (emp.upper[key] - emp.lower[key]) - 1e-3)
        report = bound_gap_report(predicted, emp)
        assert not report.sound
        assert np.all(report.detail[key]["violation"])

    def test_shape_mismatch(self, small_nets, rng):
        net = small_nets[0]
        emp = empirical_bounds(net, rng.normal(size=(3,) + net.input_shape))
        key = next(iter(emp.lower))
        with pytest.raises(ShapeMismatch):
            bound_gap_report({key: (np.zeros(1), np.zeros(1))}, emp)


class TestExactOracles:
    def test_linear_layer_example(self):
        assert linear_layer_exact([[2.0], [-1.0]], [0.0], [1.0, 1.0], 0.5, 0) == (-0.5, 2.5)

    def test_linear_layer_degenerate_cases(self, rng):
        W, b, x = rng.normal(size=(4, 2)), rng.normal(size=2), rng.normal(size=4)
        lo, hi = linear_layer_exact(W, b, x, 0.0, 1)
        assert lo == hi == pytest.approx(x @ W[:, 1] + b[1])
        W[:, 0] = 0
        assert linear_layer_exact(W, b, x, 0.3, 0) == (b[0], b[0])
        with pytest.raises(ShapeMismatch):
            linear_layer_exact(W, b, np.ones(3), 0.1, 0)

    def test_brute_force_linear_example(self):
        net = linear_net(np.eye(2), np.zeros(2))
        x = np.array([[[0.5, 0.5]]])
        assert brute_force_min(net, x, 0.1, np.array([1.0, -1.0])) == pytest.approx(-0.2, abs=1e-15)

    def test_brute_force_zero_epsilon(self, small_nets, rng):
        net = small_nets[0]
        x = rng.normal(size=net.input_shape)
        d = rng.normal(size=net.num_classes)
        assert brute_force_min(net, x, 0.0, d, mode="sample", resolution=5) == pytest.approx(d @ network_forward(net, x))

    def test_corner_limit(self):
        net = linear_net(np.eye(13), np.zeros(13))
        with pytest.raises(DimensionTooLarge):
            brute_force_min(net, np.zeros((1, 1, 13)), 0.1, np.ones(13))

    def test_brute_force_bounds_the_dual_from_above(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            net = random_network(rng, k=2, t=2, input_shape=(1, 3, 3), max_channels=2, fc_width=4)
            x = rng.uniform(0, 1, net.input_shape)
            d = rng.normal(size=net.num_classes)
            bound = dual_bound(net, x, 0.1, d, compute_bounds(net, x, 0.1))
            for mode, res in (("corner", 0), ("grid", 3), ("sample", 2000)):
                assert bound <= brute_force_min(net, x, 0.1, d, mode=mode, resolution=res) + 1e-12

    def test_interval_bounds(self, small_nets, rng):
        net = small_nets[6]
        x = rng.normal(size=net.input_shape)
        trace = trace_forward(net, x[None])
        for key, (l, u) in interval_bounds(net, x, 0.0).items():
            np.testing.assert_allclose(l, trace[key][0], atol=1e-12)
            np.testing.assert_allclose(u, trace[key][0], atol=1e-12)
        emp = empirical_bounds(net, iter_polytope(x, 0.1, 5000, 1))
        assert bound_gap_report(interval_bounds(net, x, 0.1), emp).sound

    def test_interval_single_layer_is_exact(self, rng):
        W, b = rng.normal(size=(5, 3)), rng.normal(size=3)
        x = rng.normal(size=(1, 1, 5))
        l, u = interval_bounds(linear_net(W, b), x, 0.2)[("preact", 1)]
        for j in range(3):
            assert (l[j], u[j]) == pytest.approx(linear_layer_exact(W, b, x, 0.2, j), rel=1e-12)

    def test_double_sandwich(self, small_nets):
        for seed, net in enumerate(small_nets[:10]):
            x = np.random.default_rng(seed).normal(size=net.input_shape)
            emp = empirical_bounds(net, iter_polytope(x, 0.05, 3000, seed))
            assert bound_gap_report(predicted_intervals(net, compute_bounds(net, x, 0.05)), emp).sound
            assert bound_gap_report(interval_bounds(net, x, 0.05), emp).sound
