"""Element-wise bounds, neuron clusters and the ReLU convex envelope."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .errors import DegenerateInterval, InvertedBounds, NegativeInput

# Crossing intervals narrower than this are widened on the upper side.
DEGENERATE_SPAN = 1e-12


class Cluster(enum.Enum):
    NEG = "NEG"
    POS = "POS"
    CROSS = "CROSS"


def classify_neuron(l: float, u: float) -> Cluster:
    if l > u:
        raise InvertedBounds(f"lower bound {l} exceeds upper bound {u}")
    if u <= 0:
        return Cluster.NEG
    if l > 0:
        return Cluster.POS
    return Cluster.CROSS


def cluster_masks(l: np.ndarray, u: np.ndarray):
    """Boolean masks ``(neg, pos, cross)`` for arrays of bounds."""
    neg = u <= 0
    pos = l > 0
    return neg, pos, ~(neg | pos)


def relu_envelope(l: float, u: float) -> Tuple[float, float]:
    """Slope and intercept of the upper chord through ``(l, 0)`` and ``(u, u)``."""
    if classify_neuron(l, u) is not Cluster.CROSS:
        raise DegenerateInterval(f"[{l}, {u}] does not cross zero")
    if u - l < DEGENERATE_SPAN:
        u = u + DEGENERATE_SPAN
    return u / (u - l), -u * l / (u - l)


def guard_degenerate(l: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Upper bounds with near-zero-width crossing intervals widened (sound)."""
    _, _, cross = cluster_masks(l, u)
    return np.where(cross & (u - l < DEGENERATE_SPAN), u + DEGENERATE_SPAN, u)


def upper_slope(l: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``u/(u-l)`` on crossing entries, ``1`` on positive and ``0`` on negative ones.

    This is the slope of the linear map a ReLU becomes when both relaxation
    slopes equal the chord slope.
    """
    neg, pos, cross = cluster_masks(l, u)
    span = np.where(cross, u - l, 1.0)
    return np.where(cross, u / span, np.where(pos, 1.0, 0.0))


def post_relu_bounds(l: np.ndarray, u: np.ndarray):
    return np.maximum(l, 0.0), np.maximum(u, 0.0)


def maxpool_running_bounds(l_r: np.ndarray, u_r: np.ndarray):
    """Running-max bounds over the last axis (window slots).

    Returns ``(l_m, u_m)`` with one more entry than the window; entry 0 is
    the fixed starting value 0.
    """
    l_r = np.asarray(l_r, dtype=np.float64)
    u_r = np.asarray(u_r, dtype=np.float64)
    if np.any(l_r < 0) or np.any(u_r < 0):
        raise NegativeInput("running maxpool bounds need non-negative window bounds")
    zero = np.zeros(l_r.shape[:-1] + (1,))
    l_m = np.concatenate([zero, np.maximum.accumulate(l_r, axis=-1)], axis=-1)
    u_m = np.concatenate([zero, np.maximum.accumulate(u_r, axis=-1)], axis=-1)
    return l_m, u_m


def maxpool_diff_bounds(l_r, u_r, l_m, u_m):
    """Bounds on ``z^R_a - z^M_a`` for every window slot ``a``."""
    return np.asarray(l_r) - np.asarray(u_m)[..., :-1], np.asarray(u_r) - np.asarray(l_m)[..., :-1]


@dataclass
class MaxpoolBounds:
    l_r: np.ndarray  # (C, H, W) post-ReLU bounds of the maxpool input
    u_r: np.ndarray
    l_m: np.ndarray  # (C, Ho, Wo, K+1) running maxima
    u_m: np.ndarray
    l_bar: np.ndarray  # (C, Ho, Wo, K) slot differences
    u_bar: np.ndarray


@dataclass
class BoundsCache:
    """Bounds for every relaxed quantity of one (network, input, epsilon).

    ``preact`` is keyed by the index of each conv/fc layer and bounds its
    output; ``relu`` is keyed by ReLU layer index and bounds its input;
    ``maxpool`` is keyed by maxpool layer index.
    """

    preact: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    relu: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    maxpool: Dict[int, MaxpoolBounds] = field(default_factory=dict)

    def cluster_counts(self) -> Dict[int, Dict[str, int]]:
        counts = {}
        for idx, (l, u) in sorted(self.relu.items()):
            neg, pos, cross = cluster_masks(l, u)
            counts[idx] = {"NEG": int(neg.sum()), "POS": int(pos.sum()), "CROSS": int(cross.sum())}
        for idx, mb in sorted(self.maxpool.items()):
            neg, pos, cross = cluster_masks(mb.l_bar, mb.u_bar)
            counts[idx] = {"NEG": int(neg.sum()), "POS": int(pos.sum()), "CROSS": int(cross.sum())}
        return counts


Strategy = Union[str, float]
SLOPE_STRATEGIES = ("u-over-span", "zero", "one")


class Slopes:
    """Lower-relaxation slopes (alpha) for crossing neurons.

    ``strategy`` is ``"u-over-span"`` (alpha = u/(u-l), the default),
    ``"zero"``, ``"one"`` or a fixed scalar in [0, 1].  ``overrides`` maps a
    ReLU or maxpool layer index to an explicit alpha array shaped like that
    layer's bounds.
    """

    def __init__(self, strategy: Strategy = "u-over-span", overrides: Optional[dict] = None):
        if isinstance(strategy, str):
            if strategy not in SLOPE_STRATEGIES:
                raise ValueError(f"unknown slope strategy {strategy!r}")
        elif not 0.0 <= float(strategy) <= 1.0:
            raise ValueError("a scalar slope must lie in [0, 1]")
        self.strategy = strategy
        self.overrides = dict(overrides or {})
        for alpha in self.overrides.values():
            alpha = np.asarray(alpha)
            if np.any(alpha < 0) or np.any(alpha > 1):
                raise ValueError("slopes must lie in [0, 1]")

    @property
    def is_chord(self) -> bool:
        """True when every crossing neuron uses the chord slope, making the dual pass linear."""
        return self.strategy == "u-over-span" and not self.overrides

    def alpha(self, layer_index: int, l: np.ndarray, u: np.ndarray) -> np.ndarray:
        if layer_index in self.overrides:
            return np.broadcast_to(np.asarray(self.overrides[layer_index], dtype=np.float64), l.shape)
        if self.strategy == "u-over-span":
            return upper_slope(l, u)
        if self.strategy == "zero":
            return np.zeros_like(l)
        if self.strategy == "one":
            return np.ones_like(l)
        return np.full_like(l, float(self.strategy))

    def __repr__(self):
        return f"Slopes({self.strategy!r}, overrides={sorted(self.overrides)})"
