"""Certified robustness bounds for convolutional networks through a dual network."""

from .bounds import compute_bounds, compute_preact_bounds
from .dual import dual_bound, run_dual_network
from .errors import CapmError
from .network import (
    ConvLayer,
    FcLayer,
    FlattenLayer,
    MaxpoolLayer,
    NetworkSpec,
    NormalizationConfig,
    ReluLayer,
    network_forward,
    validate_network,
)
from .relaxation import BoundsCache, Cluster, Slopes
from .verifier import Verdict, VerificationReport, run_dataset, verify_image, verify_target

__version__ = "0.1.0"

__all__ = [
    "BoundsCache",
    "CapmError",
    "Cluster",
    "ConvLayer",
    "FcLayer",
    "FlattenLayer",
    "MaxpoolLayer",
    "NetworkSpec",
    "NormalizationConfig",
    "ReluLayer",
    "Slopes",
    "Verdict",
    "VerificationReport",
    "compute_bounds",
    "compute_preact_bounds",
    "dual_bound",
    "network_forward",
    "run_dataset",
    "run_dual_network",
    "validate_network",
    "verify_image",
    "verify_target",
]
