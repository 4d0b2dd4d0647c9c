"""Certified bounds for ReLU networks by solving their LP relaxation with ADMM."""

from .model import (
    Affine,
    Bias,
    CircularConv,
    ConvSpec,
    Crop,
    Downsample,
    Network,
    Pad,
    PostProcess,
    ReLU,
    decompose_conv,
    forward,
)
from .io import load_network, save_network
from .relax import (
    BoundsCache,
    Box,
    LpBall,
    interval_propagate,
    linear_bound_propagate,
    tighten_bounds_admm,
)
from .solver import Certificate, LinearObjective, SolverConfig, dual_certificate, solve

__version__ = "0.1.0"
