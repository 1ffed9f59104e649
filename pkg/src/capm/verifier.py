"""Robustness verdicts per image and aggregate metrics per dataset."""

from __future__ import annotations

import enum
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .bounds import compute_bounds
from .dual import dual_bound
from .errors import EmptyDataset, ShapeMismatch
from .network import NetworkSpec, network_forward
from .relaxation import BoundsCache, Slopes


class Verdict(str, enum.Enum):
    VERIFIED = "VERIFIED"
    UNKNOWN = "UNKNOWN"
    MISCLASSIFIED = "MISCLASSIFIED"


@dataclass
class ImageResult:
    label: int
    predicted: int
    verdict: Verdict
    margins: Dict[int, float] = field(default_factory=dict)
    time_s: float = 0.0
    index: int = 0

    @property
    def min_margin(self) -> Optional[float]:
        return min(self.margins.values()) if self.margins else None


@dataclass
class VerificationReport:
    epsilon: object
    images: List[ImageResult]

    @property
    def correct(self) -> int:
        return sum(r.verdict is not Verdict.MISCLASSIFIED for r in self.images)

    @property
    def verified(self) -> int:
        return sum(r.verdict is Verdict.VERIFIED for r in self.images)

    @property
    def verified_robustness(self) -> float:
        """Verified images over correctly classified ones (0 when none are correct)."""
        return self.verified / self.correct if self.correct else 0.0

    @property
    def average_time(self) -> float:
        return sum(r.time_s for r in self.images) / len(self.images)


def _margin_seed(num_classes: int, y_star: int, targets: Sequence[int]) -> np.ndarray:
    d = np.zeros((len(targets), num_classes))
    d[:, y_star] = 1.0
    d[np.arange(len(targets)), list(targets)] -= 1.0
    return d


def verify_target(
    net: NetworkSpec,
    x,
    eps,
    y_star: int,
    y_targ: int,
    cache: BoundsCache,
    slopes: Optional[Slopes] = None,
) -> float:
    """Certified lower bound on ``f_{y*} - f_{y_targ}`` over the input box."""
    if y_star == y_targ:
        raise ValueError("target class must differ from the true class")
    d = _margin_seed(net.num_classes, y_star, [y_targ])[0]
    return float(dual_bound(net, x, eps, d, cache, slopes))


def predicted_class(logits: np.ndarray, y_star: int) -> int:
    """Argmax of the logits, with ties resolved against ``y*``.

    A tie involving ``y*`` and another class reports the other class so
    that the image counts as misclassified.
    """
    top = np.flatnonzero(logits == logits.max())
    if len(top) == 1:
        return int(top[0])
    others = [int(c) for c in top if c != y_star]
    return others[0]


def verify_image(
    net: NetworkSpec,
    x,
    eps,
    y_star: int,
    slopes: Optional[Slopes] = None,
    method: str = "incremental",
) -> ImageResult:
    start = time.perf_counter()
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeMismatch(f"image shape {x.shape} does not match network input {net.input_shape}")
    y_star = int(y_star)
    predicted = predicted_class(network_forward(net, x), y_star)
    if predicted != y_star:
        return ImageResult(y_star, predicted, Verdict.MISCLASSIFIED, time_s=time.perf_counter() - start)

    cache = compute_bounds(net, x, eps, method=method, slopes=slopes)
    targets = [c for c in range(net.num_classes) if c != y_star]
    # One batched dual pass covers every target class.
    margins = dual_bound(net, x, eps, _margin_seed(net.num_classes, y_star, targets), cache, slopes)
    by_target = {c: float(j) for c, j in zip(targets, margins)}
    verdict = Verdict.VERIFIED if all(j > 0 for j in by_target.values()) else Verdict.UNKNOWN
    return ImageResult(y_star, predicted, verdict, by_target, time.perf_counter() - start)


def default_threads() -> int:
    value = os.environ.get("CAPM_THREADS")
    if value:
        return max(1, int(value))
    return os.cpu_count() or 1


def run_dataset(
    net: NetworkSpec,
    images,
    labels,
    eps,
    threads: Optional[int] = None,
    slopes: Optional[Slopes] = None,
    method: str = "incremental",
) -> VerificationReport:
    """Verify every image; results keep dataset order whatever the thread count.

    ``eps`` is shared by all images unless it is stacked per image, i.e.
    shaped ``(N, C, H, W)``.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise EmptyDataset("no images to verify")
    if len(images) != len(labels):
        raise ShapeMismatch(f"{len(images)} images but {len(labels)} labels")
    threads = threads or default_threads()
    per_image = np.ndim(eps) == images.ndim and np.shape(eps)[0] == len(images)

    def work(i):
        eps_i = eps[i] if per_image else eps
        result = verify_image(net, images[i], eps_i, int(labels[i]), slopes, method)
        result.index = i
        return result

    if threads == 1:
        results = [work(i) for i in range(len(images))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(len(images))))
    return VerificationReport(epsilon=eps, images=results)
