import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capm.errors import MaxpoolWithoutRelu, NegativeInput, PatternViolation, ShapeMismatch
from capm.network import (
    ConvLayer,
    FcLayer,
    FlattenLayer,
    MaxpoolLayer,
    NetworkSpec,
    NormalizationConfig,
    ReluLayer,
    conv_forward,
    decompose_maxpool,
    fc_forward,
    flatten,
    maxpool_forward,
    network_forward,
    pad,
    relu_forward,
    unflatten,
    validate_network,
)
from reference import conv_sliding_window, window_max


def conv(o, c, k, s=1, p=0, seed=0):
    rng = np.random.default_rng(seed)
    return ConvLayer(rng.normal(size=(o, c, k, k)), rng.normal(size=o), s, p)


class TestValidation:
    def test_three_block_two_fc_is_accepted(self):
        layers = [
            conv(2, 1, 3), ReluLayer(), MaxpoolLayer(2, 2),
            conv(3, 2, 2, p=1), ReluLayer(), MaxpoolLayer(2, 1),
            FlattenLayer(), FcLayer(np.ones((4, 27)), np.zeros(4)), ReluLayer(), FcLayer(np.ones((2, 4)), np.zeros(2)),
        ]
        net = validate_network(layers, (1, 8, 8))
        assert (net.k, net.t) == (3, 2)
        assert net.shapes[0] == (2, 6, 6)
        assert net.shapes[3] == (3, 4, 4)
        assert net.shapes[5] == (3, 3, 3)
        assert net.num_classes == 2

    def test_maxpool_without_relu(self):
        with pytest.raises(MaxpoolWithoutRelu) as err:
            validate_network([conv(1, 1, 2), MaxpoolLayer(2, 1), FlattenLayer()], (1, 4, 4))
        assert err.value.layer_index == 1

    def test_non_tiling_conv(self):
        layers = [conv(1, 1, 2, s=2), ReluLayer(), MaxpoolLayer(1, 1), FlattenLayer(), FcLayer(np.ones((1, 4)), [0.0])]
        with pytest.raises(ShapeMismatch) as err:
            validate_network(layers, (1, 5, 5))
        assert err.value.layer_index == 0

    @pytest.mark.parametrize("kinds", [
        [ReluLayer(), FlattenLayer()],
        [FlattenLayer(), FcLayer(np.ones((1, 4)), [0.0]), ReluLayer()],
    ])
    def test_pattern_violations(self, kinds):
        with pytest.raises(PatternViolation):
            validate_network(kinds, (1, 2, 2))

    def test_flatten_fc_net_is_the_one_block_case(self):
        net = validate_network([FlattenLayer(), FcLayer(np.eye(4), np.zeros(4))], (1, 2, 2))
        assert (net.k, net.t) == (1, 1)

    def test_fc_width_mismatch_names_the_layer(self):
        with pytest.raises(ShapeMismatch) as err:
            validate_network([FlattenLayer(), FcLayer(np.ones((2, 5)), np.zeros(2))], (1, 2, 2))
        assert err.value.layer_index == 1

    def test_normalization_needs_positive_std(self):
        with pytest.raises(ValueError):
            NormalizationConfig((0.5,), (0.0,))


class TestPad:
    def test_single_pixel(self):
        out = pad(np.array([[[5.0]]]), 1)
        expected = np.zeros((1, 3, 3))
        expected[0, 1, 1] = 5
        np.testing.assert_array_equal(out, expected)

    def test_zero_padding_is_identity(self, rng):
        m = rng.normal(size=(2, 3, 4))
        np.testing.assert_array_equal(pad(m, 0), m)

    def test_block_is_centered(self):
        out = pad(np.array([[[1.0, 2], [3, 4]]]), 1)
        assert out.shape == (1, 4, 4)
        np.testing.assert_array_equal(out[0, 1:3, 1:3], [[1, 2], [3, 4]])
        assert out.sum() == 10


class TestConv:
    def test_one_by_one_kernel(self):
        x = np.arange(1.0, 10.0).reshape(1, 3, 3)
        out = conv_forward(x, ConvLayer(np.full((1, 1, 1, 1), 2.0), [1.0]))
        np.testing.assert_array_equal(out[0], [[3, 5, 7], [9, 11, 13], [15, 17, 19]])

    def test_padded_all_ones_kernel(self):
        x = np.array([[[1.0, 2], [3, 4]]])
        out = conv_forward(x, ConvLayer(np.ones((1, 1, 2, 2)), [0.0], 1, 1))
        np.testing.assert_array_equal(out[0], [[1, 3, 2], [4, 10, 6], [3, 7, 4]])

    def test_zero_input_gives_bias(self):
        layer = ConvLayer(np.ones((2, 1, 2, 2)), [0.5, -1.0])
        out = conv_forward(np.zeros((1, 3, 3)), layer)
        np.testing.assert_array_equal(out[0], 0.5)
        np.testing.assert_array_equal(out[1], -1.0)

    @settings(max_examples=60, deadline=None)
    @given(
        c_in=st.integers(1, 3), c_out=st.integers(1, 3), k=st.integers(1, 3),
        s=st.integers(1, 3), p=st.integers(0, 2), extra=st.integers(0, 3), seed=st.integers(0, 2**31),
    )
    def test_matches_sliding_window(self, c_in, c_out, k, s, p, extra, seed):
        size = k - 2 * p + s * extra
        if size < 1:
            size += s * ((1 - size + s - 1) // s)
        rng = np.random.default_rng(seed)
        layer = ConvLayer(rng.normal(size=(c_out, c_in, k, k)), rng.normal(size=c_out), s, p)
        x = rng.normal(size=(c_in, size, size))
        expected = conv_sliding_window(x, layer.weight, layer.bias, s, p)
        np.testing.assert_allclose(conv_forward(x, layer), expected, rtol=1e-12, atol=1e-12)

    def test_linearity(self, rng):
        layer = conv(3, 2, 3, s=2, p=1)
        x, y = rng.normal(size=(2, 2, 7, 7))
        a, b = 1.7, -0.4
        lhs = conv_forward(a * x + b * y, layer)
        rhs = a * conv_forward(x, layer) + b * conv_forward(y, layer) - (a + b - 1) * conv_forward(0 * x, layer)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(relu_forward(np.array([-1.0, 2.0])), [0, 2])
        np.testing.assert_array_equal(relu_forward(np.array([-3.0, -0.5])), [0, 0])

    def test_maxpool_single_window(self):
        out = maxpool_forward(np.array([[[1.0, 3], [2, 0]]]), MaxpoolLayer(2, 2))
        np.testing.assert_array_equal(out, [[[3]]])

    def test_maxpool_constant_map(self):
        out = maxpool_forward(np.full((2, 4, 4), 0.7), MaxpoolLayer(2, 1))
        np.testing.assert_array_equal(out, 0.7)

    def test_maxpool_distinct_values(self, rng):
        x = rng.permutation(16).astype(float).reshape(1, 4, 4)
        out = maxpool_forward(x, MaxpoolLayer(2, 2))
        np.testing.assert_array_equal(out, window_max(x, 2, 2))
        for m in range(2):
            for n in range(2):
                assert decompose_maxpool(x[0, 2 * m:2 * m + 2, 2 * n:2 * n + 2].reshape(-1))[-1] == out[0, m, n]

    @pytest.mark.parametrize("values,expected", [
        ((1, 3, 2, 0), (0, 1, 3, 3, 3)),
        ((0, 0, 0, 0), (0, 0, 0, 0, 0)),
        ((5,), (0, 5)),
    ])
    def test_decompose(self, values, expected):
        np.testing.assert_array_equal(decompose_maxpool(values), expected)

    def test_decompose_rejects_negative(self):
        with pytest.raises(NegativeInput):
            decompose_maxpool([1.0, -0.1])

    @settings(max_examples=40, deadline=None)
    @given(k=st.integers(1, 4), s=st.integers(1, 3), n=st.integers(0, 3), seed=st.integers(0, 2**31))
    def test_maxpool_matches_window_enumeration(self, k, s, n, seed):
        size = k + s * n
        x = np.random.default_rng(seed).uniform(0, 1, (2, size, size))
        np.testing.assert_array_equal(maxpool_forward(x, MaxpoolLayer(k, s)), window_max(x, k, s))

    def test_flatten_order(self):
        np.testing.assert_array_equal(flatten(np.array([[[7.0]], [[9.0]]])), [7, 9])
        np.testing.assert_array_equal(flatten(np.array([[[1.0, 2], [3, 4]]])), [1, 2, 3, 4])

    def test_flatten_round_trips(self, rng):
        m = rng.normal(size=(3, 2, 4))
        np.testing.assert_array_equal(unflatten(flatten(m), m.shape), m)
        v = rng.normal(size=24)
        np.testing.assert_array_equal(flatten(unflatten(v, (3, 2, 4))), v)

    def test_fc(self):
        layer = FcLayer([[1.0, -1], [2, 0]], [1.0, 0])
        np.testing.assert_array_equal(fc_forward(np.array([3.0, 4]), layer), [0, 6])
        np.testing.assert_array_equal(fc_forward(np.zeros(2), layer), [1, 0])
        v = np.array([0.3, -2.0])
        np.testing.assert_array_equal(fc_forward(v, FcLayer(np.eye(2), np.zeros(2))), v)


class TestNetworkForward:
    def test_identity_net_returns_flattened_input(self, rng):
        net = NetworkSpec([
            ConvLayer(np.ones((1, 1, 1, 1)), [0.0]), ReluLayer(), MaxpoolLayer(1, 1),
            FlattenLayer(), FcLayer(np.eye(9), np.zeros(9)),
        ], (1, 3, 3))
        x = rng.uniform(0, 1, (1, 3, 3))
        np.testing.assert_array_equal(network_forward(net, x), x.reshape(-1))

    def test_hand_evaluated_toy_net(self):
        net = NetworkSpec([
            ConvLayer(np.array([[[[1.0, -1], [0, 2]]]]), [0.5]), ReluLayer(), MaxpoolLayer(2, 1),
            FlattenLayer(), FcLayer([[1.0], [-2.0]], [0.0, 1.0]),
        ], (1, 3, 3))
        x = np.array([[[1.0, 2, 0], [0, 1, 3], [1, 1, 0]]])
        # conv: [[1-2+0+2+.5, 2-0+0+6+.5], [0-1+0+2+.5, 1-3+0+0+.5]] = [[1.5, 8.5], [1.5, -1.5]]
        # relu -> max = 8.5; fc -> (8.5, -16)
        np.testing.assert_array_equal(network_forward(net, x), [8.5, -16.0])

    def test_batch_matches_single(self, small_nets, rng):
        net = small_nets[0]
        xs = rng.normal(size=(4,) + net.input_shape)
        batch = network_forward(net, xs)
        for x, out in zip(xs, batch):
            np.testing.assert_allclose(network_forward(net, x), out, rtol=1e-12, atol=1e-12)

    def test_wrong_input_shape(self, small_nets):
        with pytest.raises(ShapeMismatch):
            network_forward(small_nets[0], np.zeros((9, 9, 9)))
