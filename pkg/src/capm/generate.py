"""Random networks following the supported pattern, for tests and oracle checks."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ShapeMismatch
from .network import ConvLayer, FcLayer, FlattenLayer, MaxpoolLayer, NetworkSpec, ReluLayer


def _conv_choices(size: int):
    out = []
    for kernel in (1, 2, 3):
        for stride in (1, 2):
            for padding in (0, 1):
                span = size + 2 * padding - kernel
                if span >= 0 and span % stride == 0:
                    out.append((kernel, stride, padding))
    return out


def _pool_choices(size: int):
    return [
        (kernel, stride)
        for kernel in (1, 2, 3)
        for stride in (1, 2)
        if size >= kernel and (size - kernel) % stride == 0 and not (kernel == 1 and stride == 2)
    ]


def random_network(
    rng: np.random.Generator,
    k: int = 2,
    t: int = 1,
    input_shape: Sequence[int] = (1, 6, 6),
    max_channels: int = 4,
    fc_width: int = 8,
    num_classes: int = 3,
    bias_scale: float = 0.3,
) -> NetworkSpec:
    """Draw a random network with ``k-1`` conv blocks and ``t`` fc layers.

    Kernel sizes, strides and paddings are drawn among the combinations that
    tile the current map exactly, preferring ones that keep the map from
    collapsing before the last block.
    """
    if k < 1 or t < 1:
        raise ValueError("need k >= 1 and t >= 1")
    channels, size, _ = input_shape
    layers = []
    for block in range(k - 1):
        remaining = k - 2 - block
        options = [
            opt for opt in _conv_choices(size)
            if (size + 2 * opt[2] - opt[0]) // opt[1] + 1 >= 1 + remaining
        ] or _conv_choices(size)
        kernel, stride, padding = options[rng.integers(len(options))]
        out_channels = int(rng.integers(1, max_channels + 1))
        fan_in = channels * kernel * kernel
        weight = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (out_channels, channels, kernel, kernel))
        layers.append(ConvLayer(weight, rng.normal(0.0, bias_scale, out_channels), stride, padding))
        size = (size + 2 * padding - kernel) // stride + 1
        channels = out_channels
        layers.append(ReluLayer())
        pools = [p for p in _pool_choices(size) if (size - p[0]) // p[1] + 1 >= 1 + remaining] or _pool_choices(size)
        if not pools:
            raise ShapeMismatch(f"no maxpool tiles a map of size {size}")
        pk, ps = pools[rng.integers(len(pools))]
        layers.append(MaxpoolLayer(pk, ps))
        size = (size - pk) // ps + 1
    layers.append(FlattenLayer())
    width = channels * size * size if k > 1 else int(np.prod(input_shape))
    for j in range(t):
        out = num_classes if j == t - 1 else fc_width
        weight = rng.normal(0.0, 1.0 / np.sqrt(width), (out, width))
        layers.append(FcLayer(weight, rng.normal(0.0, bias_scale, out)))
        if j < t - 1:
            layers.append(ReluLayer())
        width = out
    return NetworkSpec(layers, tuple(input_shape))


def random_suite(
    seed: int,
    count: int,
    ks: Sequence[int] = (2, 3),
    ts: Sequence[int] = (1, 2),
    input_shape: Optional[Sequence[int]] = None,
    **kwargs,
):
    """``count`` reproducible random networks cycling through the (k, t) grid."""
    rng = np.random.default_rng(seed)
    nets = []
    for n in range(count):
        k = ks[n % len(ks)]
        t = ts[(n // len(ks)) % len(ts)]
        shape = input_shape or (int(rng.integers(1, 3)), int(rng.integers(5, 9)), 0)
        shape = (shape[0], shape[1], shape[1])
        nets.append(random_network(rng, k=k, t=t, input_shape=shape, **kwargs))
    return nets


def conv_small_mnist(rng: np.random.Generator) -> NetworkSpec:
    """The convSmall MNIST architecture with random weights.

    Two conv blocks (16 then 32 kernels of 4x4, stride 2, padding 1, each
    followed by ReLU and a 2x2 stride-1 maxpool), then FC 800-100-10.
    """
    def conv(o, c):
        return ConvLayer(rng.normal(0, 1 / np.sqrt(16 * c), (o, c, 4, 4)), rng.normal(0, 0.1, o), 2, 1)

    def fc(o, i):
        return FcLayer(rng.normal(0, 1 / np.sqrt(i), (o, i)), rng.normal(0, 0.1, o))

    return NetworkSpec([
        conv(16, 1), ReluLayer(), MaxpoolLayer(2, 1),
        conv(32, 16), ReluLayer(), MaxpoolLayer(2, 1),
        FlattenLayer(), fc(100, 800), ReluLayer(), fc(10, 100),
    ], (1, 28, 28))
