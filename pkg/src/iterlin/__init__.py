"""Fixed-period iterative linearisation: a numpy training engine with exact JVP/VJP,
empirical NTK probes, and a desk-scale experiment runner."""

from .kernel import KernelMatrix, empirical_ntk, kernel_drift, residual_dynamics_oracle
from .linearise import Anchor, lin_forward, lin_grad, make_anchor
from .model import ModelConfig, build_lenet_variant, build_linear, build_mlp, init_params
from .tensor import Graph, ShapeError, forward, grad_check, jacobian, jvp, vjp
from .train import TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "Anchor",
    "Graph",
    "KernelMatrix",
    "ModelConfig",
    "ShapeError",
    "TrainConfig",
    "TrainResult",
    "build_lenet_variant",
    "build_linear",
    "build_mlp",
    "empirical_ntk",
    "forward",
    "grad_check",
    "init_params",
    "jacobian",
    "jvp",
    "kernel_drift",
    "lin_forward",
    "lin_grad",
    "make_anchor",
    "residual_dynamics_oracle",
    "train",
    "vjp",
]
