"""Architectures (LeNet variant, MLPs, linear maps) and parameter initialisation."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensor import ACTIVATIONS, POOLS, Conv2d, Dense, Flatten, Graph

INIT_SCHEMES = ("fan_in_normal", "fan_in_uniform")

# conv(1->50, 5x5) + conv(50->50, 5x5) + dense(800->500) + dense(500->10)
LENET_MNIST_PARAM_COUNT = 469_360


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 50
    kernel_size: int = 5
    pooling: str = "max"
    dense_widths: tuple[int, ...] = (500,)
    activation: str = "relu"
    input_shape: tuple[int, ...] = (1, 28, 28)
    num_classes: int = 10
    init: str = "fan_in_normal"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    def validate(self) -> list[str]:
        errors = []
        if self.channels < 1:
            errors.append("model.channels must be >= 1")
        if self.kernel_size < 1:
            errors.append("model.kernel_size must be >= 1")
        if self.num_classes < 2:
            errors.append("model.num_classes must be >= 2")
        if self.pooling not in POOLS:
            errors.append(f"model.pooling must be one of {sorted(POOLS)}")
        if self.activation not in ACTIVATIONS:
            errors.append(f"model.activation must be one of {sorted(ACTIVATIONS)}")
        if self.init not in INIT_SCHEMES:
            errors.append(f"model.init must be one of {list(INIT_SCHEMES)}")
        if any(w < 1 for w in self.dense_widths):
            errors.append("model.dense_widths entries must be >= 1")
        if len(self.input_shape) != 3 or any(s < 1 for s in self.input_shape):
            errors.append("model.input_shape must be (C, H, W) with positive extents")
        return errors

    def to_dict(self) -> dict:
        return asdict(self)


def build_lenet_variant(cfg: ModelConfig = ModelConfig()) -> Graph:
    """conv-act-pool-conv-act-pool-flatten-dense-act-...-dense(c); emits raw logits."""
    errors = cfg.validate()
    if errors:
        raise ValueError("; ".join(errors))
    act, pool = ACTIVATIONS[cfg.activation], POOLS[cfg.pooling]
    layers = [
        Conv2d(cfg.channels, cfg.kernel_size),
        act(),
        pool(2),
        Conv2d(cfg.channels, cfg.kernel_size),
        act(),
        pool(2),
        Flatten(),
    ]
    for width in cfg.dense_widths:
        layers += [Dense(width), act()]
    layers.append(Dense(cfg.num_classes))
    return Graph(layers, cfg.input_shape)


def build_mlp(in_dim: int, hidden: tuple[int, ...] | list[int], out_dim: int, activation: str = "tanh") -> Graph:
    act = ACTIVATIONS[activation]
    layers = []
    for width in hidden:
        layers += [Dense(width), act()]
    layers.append(Dense(out_dim))
    return Graph(layers, (in_dim,))


def build_linear(in_dim: int, out_dim: int = 1) -> Graph:
    """Single dense layer: outputs are linear in the parameters."""
    return Graph([Dense(out_dim)], (in_dim,))


def init_params(graph: Graph, seed: int = 0, scheme: str = "fan_in_normal", dtype=np.float64) -> np.ndarray:
    """Weights scaled by 1/sqrt(fan_in), biases zero."""
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    rng = np.random.default_rng(seed)
    theta = np.zeros(graph.num_params, dtype=np.float64)
    for slot in graph.layout:
        if slot.name == "bias":
            continue
        scale = 1.0 / np.sqrt(graph.fan_in(slot))
        if scheme == "fan_in_normal":
            w = rng.standard_normal(slot.size) * scale
        else:
            w = rng.uniform(-scale, scale, slot.size)
        theta[slot.offset : slot.offset + slot.size] = w
    return theta.astype(dtype)

