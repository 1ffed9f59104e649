"""Network representation and exact forward semantics.

Feature maps are plain ``numpy`` arrays of shape ``(channels, height, width)``.
Every forward helper also accepts leading batch axes, i.e. ``(..., C, H, W)``,
which the bound propagation and the Monte-Carlo oracle rely on.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from .errors import MaxpoolWithoutRelu, NegativeInput, PatternViolation, ShapeMismatch

Shape = Tuple[int, ...]


@dataclass(frozen=True, eq=False)
class ConvLayer:
    weight: np.ndarray  # (out_channels, in_channels, kernel, kernel)
    bias: np.ndarray  # (out_channels,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeMismatch(f"conv kernel must be (out, in, k, k), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"conv bias must have shape ({w.shape[0]},), got {b.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeMismatch(f"invalid stride/padding {self.stride}/{self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def output_size(self, size: int) -> int:
        """Windows along one axis.

        A stride remainder is allowed only when the skipped trailing strip
        lies entirely in the zero padding, so no input pixel is ignored.
        """
        span = size + 2 * self.padding - self.kernel
        if span < 0 or span % self.stride > self.padding:
            raise ShapeMismatch(
                f"conv (k={self.kernel}, s={self.stride}, p={self.padding}) "
                f"does not tile an input of size {size}"
            )
        return span // self.stride + 1


@dataclass(frozen=True)
class ReluLayer:
    pass


@dataclass(frozen=True)
class MaxpoolLayer:
    kernel: int
    stride: int

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ShapeMismatch(f"invalid maxpool kernel/stride {self.kernel}/{self.stride}")

    @property
    def window(self) -> int:
        return self.kernel * self.kernel

    def output_size(self, size: int) -> int:
        span = size - self.kernel
        if span < 0 or span % self.stride:
            raise ShapeMismatch(
                f"maxpool (k={self.kernel}, s={self.stride}) windows do not tile size {size}"
            )
        return span // self.stride + 1


@dataclass(frozen=True)
class FlattenLayer:
    pass


@dataclass(frozen=True, eq=False)
class FcLayer:
    weight: np.ndarray  # (out_features, in_features)
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeMismatch(f"fc weight {w.shape} and bias {b.shape} disagree")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


Layer = Union[ConvLayer, ReluLayer, MaxpoolLayer, FlattenLayer, FcLayer]

_KIND_LETTER = {ConvLayer: "c", ReluLayer: "r", MaxpoolLayer: "m", FlattenLayer: "f", FcLayer: "l"}
# conv (relu maxpool conv)* relu maxpool flatten fc (relu fc)*; the bare
# "flatten fc (relu fc)*" form is the degenerate k=1 case (no conv blocks).
_CAPM_PATTERN = re.compile(r"c(rmc)*rmfl(rl)*|fl(rl)*")


@dataclass(frozen=True)
class NormalizationConfig:
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std must have one entry per channel")
        if any(not s > 0 for s in self.std):
            raise ValueError("normalization std must be positive")

    @classmethod
    def identity(cls, channels: int) -> "NormalizationConfig":
        return cls((0.0,) * channels, (1.0,) * channels)


class NetworkSpec:
    """A validated network following the conv/relu/maxpool/flatten/fc pattern.

    Constructing one is the only way to obtain a network, so every instance
    has passed :func:`validate_network`.  ``shapes[i]`` is the output shape
    of ``layers[i]``; ``k`` counts the layer blocks (one more than the
    number of maxpools) and ``t`` the fully connected layers.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: Shape):
        layers = tuple(layers)
        if not layers:
            raise PatternViolation("layer list is empty")
        input_shape = tuple(int(s) for s in input_shape)
        if len(input_shape) != 3:
            raise ShapeMismatch(f"input shape must be (C, H, W), got {input_shape}")

        letters = []
        for i, layer in enumerate(layers):
            letter = _KIND_LETTER.get(type(layer))
            if letter is None:
                raise PatternViolation(f"unsupported layer type {type(layer).__name__}", i)
            if letter == "m" and (i == 0 or not isinstance(layers[i - 1], ReluLayer)):
                raise MaxpoolWithoutRelu("maxpool must directly follow a ReLU", i)
            letters.append(letter)
        kinds = "".join(letters)
        if not _CAPM_PATTERN.fullmatch(kinds):
            raise PatternViolation(
                f"layer order {kinds!r} does not match conv(relu maxpool conv)*relu maxpool "
                "flatten fc(relu fc)*"
            )

        shapes = []
        shape = input_shape
        for i, layer in enumerate(layers):
            try:
                shape = _output_shape(layer, shape)
            except ShapeMismatch as exc:
                raise ShapeMismatch(str(exc), i) from None
            shapes.append(shape)

        self.layers = layers
        self.input_shape = input_shape
        self.shapes = tuple(shapes)
        self.k = kinds.count("m") + 1
        self.t = kinds.count("l")

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def input_shape_of(self, index: int) -> Shape:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    def __repr__(self):
        names = ", ".join(type(layer).__name__.replace("Layer", "") for layer in self.layers)
        return f"NetworkSpec(input={self.input_shape}, k={self.k}, t={self.t}, [{names}])"


def _output_shape(layer: Layer, shape: Shape) -> Shape:
    if isinstance(layer, ConvLayer):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeMismatch(f"conv expects {layer.in_channels} input channels, got {shape}")
        return (layer.out_channels, layer.output_size(shape[1]), layer.output_size(shape[2]))
    if isinstance(layer, MaxpoolLayer):
        return (shape[0], layer.output_size(shape[1]), layer.output_size(shape[2]))
    if isinstance(layer, FlattenLayer):
        return (int(np.prod(shape)),)
    if isinstance(layer, FcLayer):
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise ShapeMismatch(f"fc expects {layer.in_features} inputs, got {shape}")
        return (layer.out_features,)
    return shape


def validate_network(layers: Sequence[Layer], input_shape: Shape) -> NetworkSpec:
    return NetworkSpec(layers, input_shape)


def pad(fmap: np.ndarray, p: int) -> np.ndarray:
    """Zero-pad the two spatial axes of ``fmap`` by ``p`` on every side."""
    if p == 0:
        return np.array(fmap, dtype=np.float64)
    widths = [(0, 0)] * (fmap.ndim - 2) + [(p, p), (p, p)]
    return np.pad(np.asarray(fmap, dtype=np.float64), widths)


def padded_regions(height: int, width: int, p: int):
    """Boolean masks (interior, up/down border, left/right border) of a padded map."""
    inner = np.zeros((height + 2 * p, width + 2 * p), dtype=bool)
    inner[p:p + height, p:p + width] = True
    up_down = np.zeros_like(inner)
    up_down[:p, :] = True
    up_down[p + height:, :] = True
    left_right = ~inner & ~up_down
    return inner, up_down, left_right


def _strided(a: np.ndarray, i: int, j: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """View of ``a[..., i + stride*m, j + stride*n]`` for m < out_h, n < out_w."""
    return a[..., i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride]


def conv_linear(fmap: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Convolution without bias.

    Kernel offset ``(i, j)`` multiplies padded pixel ``(s*m' + i, s*n' + j)``,
    i.e. the original pixel ``m = s*m' - p + i`` whose kernel index is
    ``m + p - s*m'``; offsets outside the kernel never occur.  The offsets
    are gathered into one patch matrix so the product is a single matmul.
    """
    if fmap.shape[-3] != layer.in_channels:
        raise ShapeMismatch(f"conv expects {layer.in_channels} channels, got {fmap.shape[-3]}")
    out_h = layer.output_size(fmap.shape[-2])
    out_w = layer.output_size(fmap.shape[-1])
    padded = pad(fmap, layer.padding)
    k = layer.kernel
    # (..., C, k*k, Ho, Wo) -> (..., C*k*k, Ho*Wo)
    patches = np.stack(
        [_strided(padded, i, j, layer.stride, out_h, out_w) for i in range(k) for j in range(k)], axis=-3
    )
    patches = patches.reshape(fmap.shape[:-3] + (layer.in_channels * k * k, out_h * out_w))
    out = layer.weight.reshape(layer.out_channels, -1) @ patches
    return out.reshape(fmap.shape[:-3] + (layer.out_channels, out_h, out_w))


def conv_forward(fmap: np.ndarray, layer: ConvLayer) -> np.ndarray:
    return conv_linear(fmap, layer) + layer.bias[:, None, None]


def conv_transpose(nu: np.ndarray, layer: ConvLayer, in_height: int, in_width: int) -> np.ndarray:
    """Adjoint of :func:`conv_linear`, restricted to the unpadded input pixels."""
    out_h, out_w = nu.shape[-2:]
    p, k = layer.padding, layer.kernel
    batch = nu.shape[:-3]
    flat = nu.reshape(batch + (layer.out_channels, out_h * out_w))
    grads = layer.weight.reshape(layer.out_channels, -1).T @ flat
    grads = grads.reshape(batch + (layer.in_channels, k, k, out_h, out_w))
    padded = np.zeros(batch + (layer.in_channels, in_height + 2 * p, in_width + 2 * p))
    for i in range(k):
        for j in range(k):
            _strided(padded, i, j, layer.stride, out_h, out_w)[...] += grads[..., i, j, :, :]
    return padded[..., p:p + in_height, p:p + in_width]


def relu_forward(fmap: np.ndarray) -> np.ndarray:
    return np.maximum(fmap, 0.0)


def maxpool_slot(fmap: np.ndarray, layer: MaxpoolLayer, a: int) -> np.ndarray:
    """Values at in-window offset ``a = i*kernel + j`` for every window."""
    i, j = divmod(a, layer.kernel)
    out_h = layer.output_size(fmap.shape[-2])
    out_w = layer.output_size(fmap.shape[-1])
    return _strided(fmap, i, j, layer.stride, out_h, out_w)


def maxpool_forward(fmap: np.ndarray, layer: MaxpoolLayer) -> np.ndarray:
    """Window maxima computed by the running comparison y <- max(x_a, y), y_0 = 0."""
    y = np.zeros_like(maxpool_slot(fmap, layer, 0), dtype=np.float64)
    for a in range(layer.window):
        y = np.maximum(maxpool_slot(fmap, layer, a), y)
    return y


def decompose_maxpool(values: Sequence[float]) -> np.ndarray:
    """Running maxima ``y_0 = 0, y_{a+1} = max(x_a, y_a)`` of a non-negative window."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise NegativeInput("maxpool decomposition needs non-negative inputs")
    y = np.zeros(len(values) + 1)
    for a, x in enumerate(values):
        y[a + 1] = max(x, y[a])
    return y


def flatten(fmap: np.ndarray) -> np.ndarray:
    """Row-major flattening: index ``c*H*W + m*W + n``."""
    return np.asarray(fmap).reshape(fmap.shape[:-3] + (-1,))


def unflatten(vec: np.ndarray, shape: Shape) -> np.ndarray:
    return np.asarray(vec).reshape(vec.shape[:-1] + tuple(shape))


def fc_forward(vec: np.ndarray, layer: FcLayer) -> np.ndarray:
    if vec.shape[-1] != layer.in_features:
        raise ShapeMismatch(f"fc expects {layer.in_features} inputs, got {vec.shape[-1]}")
    return vec @ layer.weight.T + layer.bias


def layer_forward(layer: Layer, z: np.ndarray) -> np.ndarray:
    if isinstance(layer, ConvLayer):
        return conv_forward(z, layer)
    if isinstance(layer, ReluLayer):
        return relu_forward(z)
    if isinstance(layer, MaxpoolLayer):
        return maxpool_forward(z, layer)
    if isinstance(layer, FlattenLayer):
        return flatten(z)
    return fc_forward(z, layer)


def network_forward(net: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """Logits for one input map ``x`` (or a batch with leading axes)."""
    z = np.asarray(x, dtype=np.float64)
    if z.shape[-3:] != net.input_shape:
        raise ShapeMismatch(f"input shape {z.shape[-3:]} does not match {net.input_shape}")
    for layer in net.layers:
        z = layer_forward(layer, z)
    return z
