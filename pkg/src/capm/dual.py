"""Backward pass of the CNN dual network.

Every function accepts dual variables with arbitrary leading batch axes, so a
whole matrix of objective seeds (one per row) is propagated in a single pass.
The objective contributions are returned per batch entry.

Sign convention: the pass is seeded with ``-d``.  With that seed the
objective below is a lower bound on ``d . f(z)`` over the relaxed polytope,
and it reduces to ``d . f(x)`` when epsilon is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import ShapeMismatch
from .network import (
    ConvLayer,
    FcLayer,
    FlattenLayer,
    MaxpoolLayer,
    NetworkSpec,
    ReluLayer,
    conv_transpose,
    maxpool_slot,
)
from .relaxation import BoundsCache, Slopes, cluster_masks, upper_slope


def _pos(v):
    return np.maximum(v, 0.0)


def _neg(v):
    return np.maximum(-v, 0.0)


def _sum_trailing(a: np.ndarray, ndim: int) -> np.ndarray:
    return a.sum(axis=tuple(range(a.ndim - ndim, a.ndim))) if ndim else a


def relaxed_relu_rule(v: np.ndarray, l: np.ndarray, u: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Map the dual variable arriving at a ReLU output back to its input.

    0 on negative neurons, identity on positive ones and
    ``u/(u-l) [v]_+ - alpha [v]_-`` on crossing ones.
    """
    neg, pos, cross = cluster_masks(l, u)
    crossing = upper_slope(l, u) * _pos(v) - alpha * _neg(v)
    return np.where(pos, v, np.where(cross, crossing, 0.0))


def relaxation_term(nu: np.ndarray, l: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Sum over crossing neurons of ``l [nu]_+``."""
    _, _, cross = cluster_masks(l, u)
    return _sum_trailing(np.where(cross, l * _pos(nu), 0.0), l.ndim)


def dual_fc_backward(nu_next, layer: FcLayer, bounds=None, alpha=None):
    """Returns ``(nu_hat, nu, objective_term)`` for one fully connected layer.

    ``bounds`` are those of the ReLU feeding this layer; without them ``nu``
    equals ``nu_hat``.  The objective term is ``-nu_next . b`` plus the
    crossing-neuron contribution.
    """
    nu_next = np.asarray(nu_next, dtype=np.float64)
    if nu_next.shape[-1] != layer.out_features:
        raise ShapeMismatch(f"dual fc expects {layer.out_features} entries, got {nu_next.shape[-1]}")
    term = -(nu_next @ layer.bias)
    nu_hat = nu_next @ layer.weight
    if bounds is None:
        return nu_hat, nu_hat, term
    l, u = bounds
    if alpha is None:
        alpha = upper_slope(l, u)
    nu = relaxed_relu_rule(nu_hat, l, u, alpha)
    return nu_hat, nu, term + relaxation_term(nu, l, u)


def dual_flatten_backward(gamma: np.ndarray, shape) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape[-1] != int(np.prod(shape)):
        raise ShapeMismatch(f"cannot reshape {gamma.shape[-1]} entries into {tuple(shape)}")
    return gamma.reshape(gamma.shape[:-1] + tuple(shape))


def dual_maxpool_backward(beta, layer: MaxpoolLayer, in_shape, l_bar, u_bar, alpha):
    """Walk the decomposed maxpool backwards.

    ``beta`` has shape ``(..., C, Ho, Wo)`` and the slot bounds/slopes have
    shape ``(C, Ho, Wo, K)``.  Returns ``(kappa, kappa_hat, objective_term)``
    with ``kappa`` stacked on a trailing slot axis and ``kappa_hat`` on the
    pre-maxpool map.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape[-3:] != l_bar.shape[:3]:
        raise ShapeMismatch(f"beta shape {beta.shape[-3:]} does not match {l_bar.shape[:3]}")
    window = layer.window
    kappa = np.zeros(beta.shape + (window,))
    kappa_hat = np.zeros(beta.shape[:-3] + tuple(in_shape))
    term = np.zeros(beta.shape[:-3])
    rho = beta
    for a in range(window - 1, -1, -1):
        lo, hi = l_bar[..., a], u_bar[..., a]
        k_a = relaxed_relu_rule(rho, lo, hi, alpha[..., a])
        term = term + relaxation_term(k_a, lo, hi)
        kappa[..., a] = k_a
        maxpool_slot(kappa_hat, layer, a)[...] += k_a
        if a > 0:
            rho = rho - k_a
    return kappa, kappa_hat, term


def dual_relu_backward(kappa_hat, l, u, alpha):
    """Returns ``(nu, objective_term)`` for a convolution-block ReLU."""
    nu = relaxed_relu_rule(np.asarray(kappa_hat, dtype=np.float64), l, u, alpha)
    return nu, relaxation_term(nu, l, u)


def dual_conv_backward(nu, layer: ConvLayer, in_shape) -> np.ndarray:
    """Adjoint of the bias-free convolution; padded coordinates are dropped."""
    nu = np.asarray(nu, dtype=np.float64)
    if nu.shape[-3] != layer.out_channels:
        raise ShapeMismatch(f"dual conv expects {layer.out_channels} channels, got {nu.shape[-3]}")
    return conv_transpose(nu, layer, in_shape[1], in_shape[2])


@dataclass
class DualState:
    """Result of one (batched) backward pass.

    ``nu_input`` is the dual variable reaching the input map; ``bias_term``
    and ``relax_term`` hold the accumulated objective contributions per
    seed.  ``layers`` keeps the intermediate variables per layer index when
    recording was requested.
    """

    nu_input: np.ndarray
    bias_term: np.ndarray
    relax_term: np.ndarray
    layers: Dict[int, Dict[str, np.ndarray]] = field(default_factory=dict)


def dual_objective(state: DualState, x, eps) -> np.ndarray:
    nu = state.nu_input
    nd = nu.ndim - state.bias_term.ndim
    x = np.asarray(x, dtype=np.float64)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), x.shape)
    return (
        -_sum_trailing(x * nu, nd)
        - _sum_trailing(eps * np.abs(nu), nd)
        + state.bias_term
        + state.relax_term
    )


def run_dual_network(
    net: NetworkSpec,
    seed: np.ndarray,
    cache: BoundsCache,
    slopes: Optional[Slopes] = None,
    upto: Optional[int] = None,
    record: bool = False,
) -> DualState:
    """Propagate ``seed`` (dual variable on the output of layer ``upto``) to the input."""
    slopes = slopes or Slopes()
    last = len(net.layers) - 1 if upto is None else upto
    nu = np.asarray(seed, dtype=np.float64)
    out_shape = net.shapes[last]
    if nu.shape[nu.ndim - len(out_shape):] != out_shape:
        raise ShapeMismatch(f"seed shape {nu.shape} does not end with {out_shape}")
    batch = nu.shape[: nu.ndim - len(out_shape)]
    bias_term = np.zeros(batch)
    relax_term = np.zeros(batch)
    records: Dict[int, Dict[str, np.ndarray]] = {}

    i = last
    while i >= 0:
        layer = net.layers[i]
        if isinstance(layer, FcLayer):
            relu_idx = i - 1 if i > 0 and isinstance(net.layers[i - 1], ReluLayer) else None
            if relu_idx is None:
                nu_hat, nu_new, _ = dual_fc_backward(nu, layer)
            else:
                l, u = cache.relu[relu_idx]
                alpha = slopes.alpha(relu_idx, l, u)
                nu_hat, nu_new, _ = dual_fc_backward(nu, layer, (l, u), alpha)
                relax_term = relax_term + relaxation_term(nu_new, l, u)
            bias_term = bias_term - nu @ layer.bias
            if record:
                records[i] = {"nu_next": nu, "nu_hat": nu_hat, "nu": nu_new}
            nu = nu_new
            i = i - 1 if relu_idx is None else i - 2
        elif isinstance(layer, FlattenLayer):
            nu = dual_flatten_backward(nu, net.input_shape_of(i))
            if record:
                records[i] = {"beta": nu}
            i -= 1
        elif isinstance(layer, MaxpoolLayer):
            mb = cache.maxpool[i]
            alpha_m = slopes.alpha(i, mb.l_bar, mb.u_bar)
            kappa, kappa_hat, term = dual_maxpool_backward(
                nu, layer, net.input_shape_of(i), mb.l_bar, mb.u_bar, alpha_m
            )
            relax_term = relax_term + term
            relu_idx = i - 1
            l, u = cache.relu[relu_idx]
            nu_new, term = dual_relu_backward(kappa_hat, l, u, slopes.alpha(relu_idx, l, u))
            relax_term = relax_term + term
            if record:
                records[i] = {"beta": nu, "kappa": kappa, "kappa_hat": kappa_hat}
                records[relu_idx] = {"nu": nu_new}
            nu = nu_new
            i -= 2
        elif isinstance(layer, ConvLayer):
            bias_term = bias_term - _sum_trailing(nu, 2) @ layer.bias
            nu_hat = dual_conv_backward(nu, layer, net.input_shape_of(i))
            if record:
                records[i] = {"nu": nu, "nu_hat": nu_hat}
            nu = nu_hat
            i -= 1
        else:  # a ReLU is always consumed together with its successor
            raise ShapeMismatch(f"unexpected layer {layer} at {i} in the dual pass")
    return DualState(nu_input=nu, bias_term=bias_term, relax_term=relax_term, layers=records)


def dual_bound(
    net: NetworkSpec,
    x,
    eps,
    d,
    cache: BoundsCache,
    slopes: Optional[Slopes] = None,
    upto: Optional[int] = None,
):
    """Certified lower bound of ``d . output`` over the relaxed input box.

    ``d`` may carry leading batch axes; the result then has those axes.
    ``upto`` selects an intermediate conv/fc layer whose output replaces the
    logits (used for intermediate bound probes).
    """
    d = np.asarray(d, dtype=np.float64)
    state = run_dual_network(net, -d, cache, slopes, upto)
    return dual_objective(state, x, eps)
