"""MLP projector mapping visual features into the language embedding space."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .nn import Linear, Module
from .tensor import Tensor, gelu


@dataclass(frozen=True)
class ProjectorConfig:
    in_dim: int = 64
    out_dim: int = 96
    hidden_dim: int | None = None
    num_layers: int = 2

    def __post_init__(self):
        if self.num_layers < 2:
            raise ConfigError("projector needs at least two affine layers")
        if self.hidden_dim is None:
            object.__setattr__(self, "hidden_dim", self.out_dim)

    def to_dict(self) -> dict:
        return asdict(self)


class Projector(Module):
    """Affine layers with GELU between them; the last layer is linear."""

    def __init__(self, config: ProjectorConfig, rng: np.random.Generator):
        self.config = config
        dims = [config.in_dim] + [config.hidden_dim] * (config.num_layers - 1) + [config.out_dim]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.config.in_dim:
            raise ConfigError(f"projector expects {self.config.in_dim}-dim features, got {z.shape[-1]}")
        x = z
        for i, layer in enumerate(self.layers):
            if i:
                x = gelu(x)
            x = layer(x)
        return x
