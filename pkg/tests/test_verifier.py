import numpy as np
import pytest

from capm.bounds import compute_bounds
from capm.errors import EmptyDataset
from capm.generate import random_suite
from capm.network import FcLayer, FlattenLayer, NetworkSpec, network_forward
from capm.oracle import iter_polytope
from capm.verifier import (
    ImageResult,
    default_threads,
    Verdict,
    VerificationReport,
    predicted_class,
    run_dataset,
    verify_image,
    verify_target,
)


def identity_net(n=2, bias=None):
    return NetworkSpec([FlattenLayer(), FcLayer(np.eye(n), np.zeros(n) if bias is None else bias)], (1, 1, n))


def labelled(net, xs):
    return np.array([int(np.argmax(network_forward(net, x))) for x in xs])


class TestTarget:
    def test_point_margin(self):
        net = identity_net()
        x = np.array([[[3.0, 1.0]]])
        assert verify_target(net, x, 0.0, 0, 1, compute_bounds(net, x, 0.0)) == pytest.approx(2.0)

    def test_same_class_rejected(self):
        net = identity_net()
        x = np.zeros((1, 1, 2))
        with pytest.raises(ValueError):
            verify_target(net, x, 0.0, 1, 1, compute_bounds(net, x, 0.0))

    def test_below_sampled_margins(self, small_nets):
        for seed, net in enumerate(small_nets[:6]):
            x = np.random.default_rng(seed).normal(size=net.input_shape)
            cache = compute_bounds(net, x, 0.1)
            logits = np.concatenate([network_forward(net, z) for z in iter_polytope(x, 0.1, 4000, seed)])
            j = verify_target(net, x, 0.1, 0, 1, cache)
            assert j <= (logits[:, 0] - logits[:, 1]).min() + 1e-12


class TestImage:
    def test_verified_and_unknown(self):
        net = identity_net(3)
        x = np.array([[[1.0, 0.5, 0.2]]])
        assert verify_image(net, x, 0.1, 0).verdict is Verdict.VERIFIED
        result = verify_image(net, x, 0.3, 0)
        assert result.verdict is Verdict.UNKNOWN
        assert result.margins == pytest.approx({1: -0.1, 2: 0.2})

    def test_misclassified_skips_dual(self):
        result = verify_image(identity_net(), np.array([[[0.0, 1.0]]]), 0.1, 0)
        assert result.verdict is Verdict.MISCLASSIFIED and result.margins == {}

    def test_tie_is_misclassified(self):
        assert predicted_class(np.array([1.0, 1.0, 0.0]), 0) == 1
        assert predicted_class(np.array([1.0, 1.0, 0.0]), 2) == 0
        assert verify_image(identity_net(), np.array([[[1.0, 1.0]]]), 0.0, 0).verdict is Verdict.MISCLASSIFIED

    def test_never_verified_against_found_attacks(self, small_nets):
        for seed, net in enumerate(small_nets):
            x = np.random.default_rng(seed).normal(size=net.input_shape)
            label = int(np.argmax(network_forward(net, x)))
            result = verify_image(net, x, 0.2, label)
            if result.verdict is Verdict.VERIFIED:
                logits = np.concatenate([network_forward(net, z) for z in iter_polytope(x, 0.2, 3000, seed)])
                assert np.all(logits.argmax(axis=1) == label)


class TestDataset:
    def test_ratio_counts_only_correct_images(self):
        def result(v):
            return ImageResult(0, 0 if v != Verdict.MISCLASSIFIED else 1, v)
        images = [result(Verdict.VERIFIED)] * 80 + [result(Verdict.UNKNOWN)] * 20 + [result(Verdict.MISCLASSIFIED)] * 7
        report = VerificationReport(0.1, images)
        assert report.correct == 100 and report.verified_robustness == 0.8

    def test_zero_epsilon_verifies_everything(self, small_nets):
        net = small_nets[0]
        xs = np.random.default_rng(0).normal(size=(6,) + net.input_shape)
        report = run_dataset(net, xs, labelled(net, xs), 0.0, threads=2)
        assert report.verified_robustness == 1.0
        assert [r.index for r in report.images] == list(range(6))

    def test_empty(self, small_nets):
        net = small_nets[0]
        with pytest.raises(EmptyDataset):
            run_dataset(net, np.zeros((0,) + net.input_shape), [], 0.1)

    def test_thread_count_does_not_change_results(self):
        net = random_suite(3, 1)[0]
        xs = np.random.default_rng(1).normal(size=(8,) + net.input_shape)
        labels = labelled(net, xs)
        def strip(rep):
            return [(r.index, r.verdict, r.margins) for r in rep.images]

        base = strip(run_dataset(net, xs, labels, 0.05, threads=1))
        assert strip(run_dataset(net, xs, labels, 0.05, threads=4)) == base

    def test_per_image_epsilon(self):
        net = identity_net(3)
        xs = np.array([[[[1.0, 0.5, 0.2]]]] * 2)
        eps = np.stack([np.full((1, 1, 3), 0.1), np.full((1, 1, 3), 0.3)])
        report = run_dataset(net, xs, [0, 0], eps, threads=1)
        assert [r.verdict for r in report.images] == [Verdict.VERIFIED, Verdict.UNKNOWN]

    def test_env_sets_default_threads(self, monkeypatch):
        monkeypatch.setenv("CAPM_THREADS", "3")
        assert default_threads() == 3
