"""Independent ground truth for the certified bounds.

Nothing here uses the dual network.  Samples come from numpy's PCG64
generator seeded through ``SeedSequence``; draws are consumed in a fixed
order, so a sample set depends only on ``(x, eps, n_adv, seed)`` and not on
how it is chunked.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, Tuple

import numpy as np

from .errors import DimensionTooLarge, ShapeMismatch
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
    flatten,
    layer_forward,
    maxpool_slot,
    network_forward,
)
from .relaxation import BoundsCache

CORNER_LIMIT = 12

Key = Tuple[str, int]


@dataclass
class PolytopeSampleSet:
    n_adv: int
    seed: int
    samples: np.ndarray  # (n_adv, *x.shape)


def _box(x, eps):
    x = np.asarray(x, dtype=np.float64)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), x.shape)
    return x - eps, 2.0 * eps


def iter_polytope(x, eps, n_adv: int, seed: int, chunk: int = 10_000) -> Iterator[np.ndarray]:
    """Yield uniform samples of the input box in chunks of at most ``chunk``."""
    if n_adv < 1:
        raise ValueError("need at least one sample")
    low, width = _box(x, eps)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    done = 0
    while done < n_adv:
        n = min(chunk, n_adv - done)
        u = rng.random((n,) + low.shape)
        yield np.minimum(low + width * u, low + width)
        done += n


def sample_polytope(x, eps, n_adv: int, seed: int) -> PolytopeSampleSet:
    samples = np.concatenate(list(iter_polytope(x, eps, n_adv, seed)))
    return PolytopeSampleSet(n_adv, seed, samples)


def trace_forward(net: NetworkSpec, z: np.ndarray) -> Dict[Key, np.ndarray]:
    """Every bounded intermediate quantity for a batch of inputs ``(B, C, H, W)``.

    Keys mirror the bounds cache: ``("preact", i)`` for conv/fc outputs,
    ``("maxpool_r", i)`` for the maxpool input, ``("maxpool_m", i)`` for the
    running maxima (slot axis last) and ``("maxpool_bar", i)`` for the slot
    differences.
    """
    out: Dict[Key, np.ndarray] = {}
    z = np.asarray(z, dtype=np.float64)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, MaxpoolLayer):
            running = [np.zeros_like(maxpool_slot(z, layer, 0))]
            diffs = []
            for a in range(layer.window):
                slot = maxpool_slot(z, layer, a)
                diffs.append(slot - running[-1])
                running.append(np.maximum(slot, running[-1]))
            out[("maxpool_r", i)] = z
            out[("maxpool_m", i)] = np.stack(running, axis=-1)
            out[("maxpool_bar", i)] = np.stack(diffs, axis=-1)
            z = running[-1]
        else:
            z = layer_forward(layer, z)
            if isinstance(layer, (ConvLayer, FcLayer)):
                out[("preact", i)] = z
    return out


@dataclass
class EmpiricalBounds:
    """Per-neuron sample minima/maxima, keyed like :func:`trace_forward`."""

    lower: Dict[Key, np.ndarray] = field(default_factory=dict)
    upper: Dict[Key, np.ndarray] = field(default_factory=dict)
    count: int = 0

    def update(self, trace: Dict[Key, np.ndarray]):
        for key, values in trace.items():
            lo, hi = values.min(axis=0), values.max(axis=0)
            if key in self.lower:
                lo = np.minimum(lo, self.lower[key])
                hi = np.maximum(hi, self.upper[key])
            self.lower[key], self.upper[key] = lo, hi
        self.count += len(next(iter(trace.values())))

    def gap(self, key: Key) -> np.ndarray:
        return self.upper[key] - self.lower[key]


def empirical_bounds(net: NetworkSpec, samples) -> EmpiricalBounds:
    """Fold the forward traces of ``samples`` (an array or an iterable of chunks)."""
    if isinstance(samples, PolytopeSampleSet):
        samples = samples.samples
    chunks: Iterable[np.ndarray] = [samples] if isinstance(samples, np.ndarray) else samples
    emp = EmpiricalBounds()
    for chunk in chunks:
        if len(chunk) == 0:
            continue
        emp.update(trace_forward(net, chunk))
    if emp.count == 0:
        raise ValueError("sample set is empty")
    return emp


def predicted_intervals(net: NetworkSpec, cache: BoundsCache) -> Dict[Key, Tuple[np.ndarray, np.ndarray]]:
    """The cached bounds re-keyed to match :func:`trace_forward`."""
    out = {}
    for i, bounds in cache.preact.items():
        out[("preact", i)] = bounds
    for i, mb in cache.maxpool.items():
        out[("maxpool_r", i)] = (mb.l_r, mb.u_r)
        out[("maxpool_m", i)] = (mb.l_m, mb.u_m)
        out[("maxpool_bar", i)] = (mb.l_bar, mb.u_bar)
    return out


@dataclass
class GapRow:
    key: Key
    neurons: int
    mean_predicted_gap: float
    mean_empirical_gap: float
    mean_difference: float
    min_difference: float
    violations: int


@dataclass
class BoundGapReport:
    rows: list
    detail: Dict[Key, Dict[str, np.ndarray]]

    @property
    def violations(self) -> int:
        return sum(r.violations for r in self.rows)

    @property
    def sound(self) -> bool:
        return self.violations == 0


def bound_gap_report(predicted, empirical: EmpiricalBounds, tol: float = 1e-9) -> BoundGapReport:
    """Compare predicted gaps ``u_p - l_p`` with sampled gaps ``u_est - l_est``.

    A neuron is a violation when its gap difference is negative or when the
    sampled range escapes the predicted interval, both beyond ``tol`` scaled
    by the magnitude of the values involved.
    """
    rows, detail = [], {}
    for key in sorted(empirical.lower, key=lambda k: (k[1], k[0])):
        if key not in predicted:
            continue
        l_p, u_p = (np.asarray(b, dtype=np.float64) for b in predicted[key])
        l_r, u_r = empirical.lower[key], empirical.upper[key]
        if l_p.shape != l_r.shape:
            raise ShapeMismatch(f"{key}: predicted {l_p.shape} vs empirical {l_r.shape}")
        g_p, g_r = u_p - l_p, u_r - l_r
        diff = g_p - g_r
        scale = tol * (1.0 + np.maximum(np.abs(l_r), np.abs(u_r)))
        bad = (diff < -scale) | (l_r < l_p - scale) | (u_r > u_p + scale)
        detail[key] = {"l_p": l_p, "u_p": u_p, "l_est": l_r, "u_est": u_r, "diff": diff, "violation": bad}
        rows.append(GapRow(
            key=key,
            neurons=int(diff.size),
            mean_predicted_gap=float(g_p.mean()),
            mean_empirical_gap=float(g_r.mean()),
            mean_difference=float(diff.mean()),
            min_difference=float(diff.min()),
            violations=int(bad.sum()),
        ))
    return BoundGapReport(rows, detail)


def linear_layer_exact(W, b, x, eps, j: int) -> Tuple[float, float]:
    """Exact range of output ``j`` of ``y = W^T z + b`` over the box around ``x``.

    ``W`` has shape ``(n_in, n_out)``; the extremes follow from Hölder's
    inequality, ``(W^T x + b)_j -/+ sum_i eps_i |W_ij|``.
    """
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if W.ndim != 2 or W.shape[0] != x.size:
        raise ShapeMismatch(f"W {W.shape} does not match input of size {x.size}")
    b = np.broadcast_to(np.asarray(b, dtype=np.float64), (W.shape[1],))
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), x.shape)
    center = x @ W[:, j] + b[j]
    radius = eps @ np.abs(W[:, j])
    return float(center - radius), float(center + radius)


def box_corners(x, eps) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size > CORNER_LIMIT:
        raise DimensionTooLarge(f"{x.size} inputs exceed the {CORNER_LIMIT}-dimension corner limit")
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), x.shape).reshape(-1)
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=x.size)))
    return (x.reshape(-1) + signs * eps).reshape((-1,) + x.shape)


def brute_force_min(
    net: NetworkSpec,
    x,
    eps,
    d,
    mode: str = "corner",
    resolution: int = 5,
    seed: int = 0,
    chunk: int = 10_000,
) -> float:
    """Smallest ``d . f(z)`` found by enumeration; an upper bound on the true minimum.

    ``corner`` enumerates the box corners (exact for piecewise-linear nets
    whose minimum sits at a vertex, in particular linear ones) plus the
    centre; ``grid`` sweeps ``resolution`` points per axis and ``sample``
    draws ``resolution`` uniform samples.
    """
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if mode == "corner":
        points: Iterable[np.ndarray] = [np.concatenate([box_corners(x, eps), x[None]])]
    elif mode == "grid":
        if resolution ** x.size > 10 ** 7:
            raise DimensionTooLarge(f"grid of {resolution}^{x.size} points is too large")
        low, width = _box(x, eps)
        axes = [np.linspace(0.0, 1.0, resolution)] * x.size
        grid = np.array(list(itertools.product(*axes))).reshape((-1,) + x.shape)
        points = (low + width * grid[i:i + chunk] for i in range(0, len(grid), chunk))
    elif mode == "sample":
        points = iter_polytope(x, eps, resolution, seed, chunk)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(min((network_forward(net, p) @ d).min() for p in points))


def interval_bounds(net: NetworkSpec, x, eps) -> Dict[Key, Tuple[np.ndarray, np.ndarray]]:
    """Naive interval propagation, keyed like :func:`trace_forward`."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), x.shape)
    lo, hi = x - eps, x + eps
    out = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, ConvLayer):
            center, radius = (lo + hi) / 2, (hi - lo) / 2
            mid = conv_forward(center, layer)
            rad = conv_linear(radius, ConvLayer(np.abs(layer.weight), layer.bias, layer.stride, layer.padding))
            lo, hi = mid - rad, mid + rad
            out[("preact", i)] = (lo, hi)
        elif isinstance(layer, FcLayer):
            center, radius = (lo + hi) / 2, (hi - lo) / 2
            mid = fc_forward(center, layer)
            rad = radius @ np.abs(layer.weight).T
            lo, hi = mid - rad, mid + rad
            out[("preact", i)] = (lo, hi)
        elif isinstance(layer, ReluLayer):
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
        elif isinstance(layer, FlattenLayer):
            lo, hi = flatten(lo), flatten(hi)
        elif isinstance(layer, MaxpoolLayer):
            out[("maxpool_r", i)] = (lo, hi)
            run_lo = [np.zeros_like(maxpool_slot(lo, layer, 0))]
            run_hi = [np.zeros_like(run_lo[0])]
            bar_lo, bar_hi = [], []
            for a in range(layer.window):
                s_lo, s_hi = maxpool_slot(lo, layer, a), maxpool_slot(hi, layer, a)
                bar_lo.append(s_lo - run_hi[-1])
                bar_hi.append(s_hi - run_lo[-1])
                run_lo.append(np.maximum(s_lo, run_lo[-1]))
                run_hi.append(np.maximum(s_hi, run_hi[-1]))
            out[("maxpool_m", i)] = (np.stack(run_lo, -1), np.stack(run_hi, -1))
            out[("maxpool_bar", i)] = (np.stack(bar_lo, -1), np.stack(bar_hi, -1))
            lo, hi = run_lo[-1], run_hi[-1]
    return out
