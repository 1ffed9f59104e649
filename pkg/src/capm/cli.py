"""Command-line entry point: ``capm verify | bounds | mc-audit | oracle-check``."""

from __future__ import annotations

import argparse
import sys
from typing import List, Optional

import numpy as np

from . import io
from .bounds import BOUND_METHODS, compute_bounds
from .dual import dual_bound
from .errors import CapmError
from .generate import random_suite
from .network import NetworkSpec, NormalizationConfig, network_forward
from .oracle import (
    bound_gap_report,
    empirical_bounds,
    interval_bounds,
    iter_polytope,
    predicted_intervals,
)
from .relaxation import SLOPE_STRATEGIES, Slopes
from .verifier import Verdict, run_dataset

EXIT_OK, EXIT_UNKNOWN, EXIT_INPUT = 0, 1, 2


def _load_array(path, num_classes: int = 10) -> np.ndarray:
    """IDX files, or ``.npy`` arrays as a raw fallback (images in [0, 1])."""
    if str(path).endswith(".npy"):
        return np.load(path)
    return io.load_idx(path, num_classes)


def _inputs(args, net: NetworkSpec, norm: NormalizationConfig):
    """Normalized images and radii for the requested slice of the dataset."""
    images = _load_array(args.images).astype(np.float64)
    if images.ndim == 3:
        images = images[:, None]
    if getattr(args, "count", None):
        images = images[: args.count]
    if args.epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if args.epsilon_normalized:
        if args.clip:
            raise ValueError("--clip needs a raw-space epsilon")
        mean = np.asarray(norm.mean).reshape(-1, 1, 1)
        std = np.asarray(norm.std).reshape(-1, 1, 1)
        return (images - mean) / std, np.full(images.shape, args.epsilon)
    pairs = [io.normalize(img, norm, args.epsilon, clip=args.clip) for img in images]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def _single_input(args, net, norm):
    images, eps = _inputs(args, net, norm)
    if not 0 <= args.image_index < len(images):
        raise ValueError(f"image index {args.image_index} out of range for {len(images)} images")
    return images[args.image_index], eps[args.image_index]


def cmd_verify(args) -> int:
    net, norm = io.load_model(args.model)
    images, eps = _inputs(args, net, norm)
    labels = _load_array(args.labels, net.num_classes)[: len(images)]
    report = run_dataset(net, images, labels, eps, threads=args.threads, slopes=Slopes(args.alpha), method=args.method)
    report.epsilon = args.epsilon
    if args.out:
        io.write_report(report, args.out, args.csv)
    elif args.csv:
        raise ValueError("--csv needs --out")
    print(
        f"verified {report.verified}/{report.correct} correctly classified "
        f"({100 * report.verified_robustness:.1f}%), {len(report.images)} images, "
        f"eps={args.epsilon}, avg {report.average_time:.3f}s"
    )
    unknown = any(r.verdict is Verdict.UNKNOWN for r in report.images)
    return EXIT_UNKNOWN if args.strict and unknown else EXIT_OK


def cmd_bounds(args) -> int:
    net, norm = io.load_model(args.model)
    x, eps = _single_input(args, net, norm)
    cache = compute_bounds(net, x, eps, method=args.method, slopes=Slopes(args.alpha))
    io.write_bounds_csv(cache, args.out)
    for layer, counts in cache.cluster_counts().items():
        print(f"layer {layer}: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_mc_audit(args) -> int:
    net, norm = io.load_model(args.model)
    x, eps = _single_input(args, net, norm)
    cache = compute_bounds(net, x, eps, method=args.method, slopes=Slopes(args.alpha))
    emp = empirical_bounds(net, iter_polytope(x, eps, args.samples, args.seed, args.chunk))
    report = bound_gap_report(predicted_intervals(net, cache), emp)
    io.write_gap_csv(report, args.out)
    for row in report.rows:
        print(
            f"{row.key[0]}@{row.key[1]}: g_p={row.mean_predicted_gap:.6g} g_r={row.mean_empirical_gap:.6g} "
            f"diff={row.mean_difference:.6g} violations={row.violations}"
        )
    return EXIT_OK if report.sound else EXIT_UNKNOWN


def _check_net(net: NetworkSpec, x, eps, samples: int, seed: int) -> List[str]:
    """Failure messages for one network (empty when every oracle agrees)."""
    failures = []
    d = np.eye(net.num_classes)
    clean = network_forward(net, x)
    exact = dual_bound(net, x, 0.0, d, compute_bounds(net, x, 0.0))
    if np.any(np.abs(exact - clean) > 1e-9 * (1 + np.abs(clean))):
        failures.append("eps=0 bound differs from the forward pass")
    cache = compute_bounds(net, x, eps)
    other = compute_bounds(net, x, eps, method="backward")
    for i, (l, u) in cache.preact.items():
        if not (np.allclose(l, other.preact[i][0], atol=1e-9) and np.allclose(u, other.preact[i][1], atol=1e-9)):
            failures.append(f"bound routes disagree at layer {i}")
    emp = empirical_bounds(net, iter_polytope(x, eps, samples, seed))
    if not bound_gap_report(predicted_intervals(net, cache), emp).sound:
        failures.append("cached bounds miss sampled activations")
    if not bound_gap_report(interval_bounds(net, x, eps), emp).sound:
        failures.append("interval bounds miss sampled activations")
    lower = dual_bound(net, x, eps, d, cache)
    sampled = np.concatenate([network_forward(net, z) for z in iter_polytope(x, eps, samples, seed)])
    if np.any(lower > sampled.min(axis=0) + 1e-9):
        failures.append("dual bound exceeds a sampled output")
    return failures


def cmd_oracle_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.model:
        net, _ = io.load_model(args.model)
        nets = [net] * args.nets
    else:
        nets = random_suite(args.seed, args.nets)
    failed = 0
    for n, net in enumerate(nets):
        x = rng.uniform(0.0, 1.0, net.input_shape)
        failures = _check_net(net, x, args.epsilon, args.samples, args.seed + n)
        failed += bool(failures)
        print(f"net {n}: " + ("ok" if not failures else "; ".join(failures)))
    print(f"{len(nets) - failed}/{len(nets)} networks passed")
    return EXIT_OK if not failed else EXIT_UNKNOWN


def _input_args(p, single: bool):
    p.add_argument("--model", required=True, help="model JSON file")
    p.add_argument("--images", required=True, help="IDX image file or .npy array")
    if single:
        p.add_argument("--image-index", type=int, required=True)
    p.add_argument("--epsilon", type=float, required=True, help="radius in raw pixel space")
    p.add_argument("--epsilon-normalized", action="store_true", help="epsilon is already in normalized space")
    p.add_argument("--clip", action="store_true", help="intersect the raw box with [0, 1]")
    p.add_argument("--alpha", default="u-over-span", choices=SLOPE_STRATEGIES)
    p.add_argument("--method", default="incremental", choices=BOUND_METHODS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capm", description="Certified robustness bounds for CNNs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="verify a dataset")
    _input_args(p, single=False)
    p.add_argument("--labels", required=True, help="IDX label file or .npy array")
    p.add_argument("--count", type=int, help="only the first N images")
    p.add_argument("--threads", type=int, help="worker threads (default: CAPM_THREADS or CPU count)")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--csv", help="CSV report path")
    p.add_argument("--strict", action="store_true", help="exit 1 when any image is UNKNOWN")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bounds", help="write the bounds cache of one image as CSV")
    _input_args(p, single=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("mc-audit", help="compare cached bounds with Monte-Carlo ranges")
    _input_args(p, single=True)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chunk", type=int, default=10_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mc_audit)

    p = sub.add_parser("oracle-check", help="run the property oracles")
    p.add_argument("--model", help="model JSON file (default: generated networks)")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nets", type=int, default=10)
    p.add_argument("--samples", type=int, default=2000)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (CapmError, OSError, ValueError) as exc:
        print(f"capm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
