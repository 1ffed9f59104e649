"""Layer-by-layer construction of the bounds cache.

Two interchangeable routes compute the pre-activation bounds:

``"incremental"``
    With chord slopes every relaxed ReLU acts as a fixed linear map, so the
    dual network of each truncated prefix is linear in its seed.  We keep
    the transposed dual matrices as rows pushed forward through the network:
    one row per input pixel, one row per crossing neuron (injected where its
    relaxation sits) and the affine image of the clean input.  Adding a layer
    pushes the existing rows through it once, so the matrices computed for
    layer ``l-1`` are reused for layer ``l``.

``"backward"``
    Runs the dual network of every truncated prefix with an identity seed
    (and its negation).  Slower, but honours any slope strategy; it is the
    literal reading of the smaller-dual-network construction and serves as
    a cross-check of the incremental route.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .dual import dual_bound
from .network import (
    ConvLayer,
    FcLayer,
    FlattenLayer,
    MaxpoolLayer,
    NetworkSpec,
    ReluLayer,
    conv_forward,
    conv_linear,
    fc_forward,
    maxpool_slot,
)
from .relaxation import (
    BoundsCache,
    MaxpoolBounds,
    Slopes,
    cluster_masks,
    guard_degenerate,
    maxpool_diff_bounds,
    maxpool_running_bounds,
    post_relu_bounds,
    upper_slope,
)

BOUND_METHODS = ("incremental", "backward")


def _window_stack(fmap: np.ndarray, layer: MaxpoolLayer) -> np.ndarray:
    """Stack the window slots of ``fmap`` on a trailing axis: (C, Ho, Wo, K)."""
    return np.stack([maxpool_slot(fmap, layer, a) for a in range(layer.window)], axis=-1)


def _store_relu(cache: BoundsCache, index: int):
    l, u = cache.preact[index - 1]
    cache.relu[index] = (l, guard_degenerate(l, u))
    return cache.relu[index]


def _store_maxpool(cache: BoundsCache, layer: MaxpoolLayer, index: int) -> MaxpoolBounds:
    l_r, u_r = post_relu_bounds(*cache.relu[index - 1])
    l_m, u_m = maxpool_running_bounds(_window_stack(l_r, layer), _window_stack(u_r, layer))
    l_bar, u_bar = maxpool_diff_bounds(_window_stack(l_r, layer), _window_stack(u_r, layer), l_m, u_m)
    mb = MaxpoolBounds(l_r, u_r, l_m, u_m, l_bar, guard_degenerate(l_bar, u_bar))
    cache.maxpool[index] = mb
    return mb


def linear_maxpool(z: np.ndarray, layer: MaxpoolLayer, slope: np.ndarray) -> np.ndarray:
    """Decomposed maxpool with every slot ReLU replaced by ``slope * x``."""
    out = np.zeros_like(maxpool_slot(z, layer, 0))
    for a in range(layer.window):
        out = out + slope[..., a] * (maxpool_slot(z, layer, a) - out)
    return out


class _Tracks:
    """Forward images of the transposed dual matrices."""

    def __init__(self, x: np.ndarray, eps: np.ndarray):
        n = x.size
        self.n_input = n
        self.eps = eps.reshape(-1)
        self.rows = np.eye(n).reshape((n,) + x.shape)
        self.lower = np.zeros(0)  # lower bound of each crossing-neuron row
        self.center = x[None].astype(np.float64)

    def bounds(self):
        shape = self.center.shape[1:]
        flat = self.rows.reshape(len(self.rows), -1)
        grad, relax = flat[: self.n_input], flat[self.n_input:]
        c = self.center.reshape(-1)
        radius = self.eps @ np.abs(grad)
        l = c - radius + self.lower @ np.maximum(-relax, 0.0)
        u = c + radius - self.lower @ np.maximum(relax, 0.0)
        return l.reshape(shape), u.reshape(shape)

    def add(self, flat_index: np.ndarray, coef: np.ndarray, lower: np.ndarray):
        shape = self.center.shape[1:]
        new = np.zeros((len(flat_index), int(np.prod(shape))))
        new[np.arange(len(flat_index)), flat_index] = coef
        self.rows = np.concatenate([self.rows, new.reshape((-1,) + shape)])
        self.lower = np.concatenate([self.lower, lower])


def _incremental(net: NetworkSpec, x: np.ndarray, eps: np.ndarray) -> BoundsCache:
    cache = BoundsCache()
    tracks = _Tracks(x, eps)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, ConvLayer):
            tracks.rows = conv_linear(tracks.rows, layer)
            tracks.center = conv_forward(tracks.center, layer)
            cache.preact[i] = tracks.bounds()
        elif isinstance(layer, FcLayer):
            tracks.rows = tracks.rows @ layer.weight.T
            tracks.center = fc_forward(tracks.center, layer)
            cache.preact[i] = tracks.bounds()
        elif isinstance(layer, FlattenLayer):
            tracks.rows = tracks.rows.reshape(len(tracks.rows), -1)
            tracks.center = tracks.center.reshape(1, -1)
        elif isinstance(layer, ReluLayer):
            l, u = _store_relu(cache, i)
            slope = upper_slope(l, u)
            tracks.rows = tracks.rows * slope
            tracks.center = tracks.center * slope
            # Rows with l == 0 carry no objective term and are skipped.
            idx = np.flatnonzero(cluster_masks(l, u)[2] & (l < 0))
            tracks.add(idx, slope.reshape(-1)[idx], l.reshape(-1)[idx])
        elif isinstance(layer, MaxpoolLayer):
            mb = _store_maxpool(cache, layer, i)
            slope = upper_slope(mb.l_bar, mb.u_bar)
            tracks.rows = linear_maxpool(tracks.rows, layer, slope)
            tracks.center = linear_maxpool(tracks.center, layer, slope)
            # A unit injected after slot a only decays through the later slots.
            keep = np.cumprod((1.0 - slope)[..., ::-1], axis=-1)[..., ::-1]
            tail = np.concatenate([keep[..., 1:], np.ones(keep.shape[:-1] + (1,))], axis=-1)
            cross = cluster_masks(mb.l_bar, mb.u_bar)[2] & (mb.l_bar < 0)
            pix, slot = np.nonzero(cross.reshape(-1, layer.window))
            tracks.add(
                pix,
                (slope * tail).reshape(-1, layer.window)[pix, slot],
                mb.l_bar.reshape(-1, layer.window)[pix, slot],
            )
    return cache


def compute_preact_bounds(
    net: NetworkSpec,
    x,
    eps,
    up_to: int,
    cache: BoundsCache,
    slopes: Optional[Slopes] = None,
):
    """Bounds on the output of conv/fc layer ``up_to`` from the truncated dual network.

    ``cache`` must already hold the bounds of every earlier nonlinearity.
    All coordinates are handled at once by seeding with the identity.
    """
    shape = net.shapes[up_to]
    n = int(np.prod(shape))
    eye = np.eye(n).reshape((n,) + shape)
    lower = dual_bound(net, x, eps, eye, cache, slopes, upto=up_to)
    upper = -dual_bound(net, x, eps, -eye, cache, slopes, upto=up_to)
    return lower.reshape(shape), upper.reshape(shape)


def _backward(net: NetworkSpec, x: np.ndarray, eps: np.ndarray, slopes: Optional[Slopes]) -> BoundsCache:
    cache = BoundsCache()
    for i, layer in enumerate(net.layers):
        if isinstance(layer, (ConvLayer, FcLayer)):
            cache.preact[i] = compute_preact_bounds(net, x, eps, i, cache, slopes)
        elif isinstance(layer, ReluLayer):
            _store_relu(cache, i)
        elif isinstance(layer, MaxpoolLayer):
            _store_maxpool(cache, layer, i)
    return cache


def compute_bounds(
    net: NetworkSpec,
    x,
    eps,
    method: str = "incremental",
    slopes: Optional[Slopes] = None,
) -> BoundsCache:
    """Build the bounds cache for input ``x`` and perturbation radius ``eps``.

    ``eps`` is a scalar or a per-pixel array shaped like ``x``.  The
    incremental route always uses chord slopes; ``slopes`` only affects the
    backward route.
    """
    if method not in BOUND_METHODS:
        raise ValueError(f"unknown bound method {method!r}")
    x = np.asarray(x, dtype=np.float64)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), x.shape).copy()
    if np.any(eps < 0):
        raise ValueError("epsilon must be non-negative")
    if method == "incremental":
        return _incremental(net, x, eps)
    return _backward(net, x, eps, slopes)
