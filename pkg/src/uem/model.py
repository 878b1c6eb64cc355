"""Model configuration and parameter initialization.

One ``ModelConfig`` describes every width in the pipeline; ``init_model``
builds the full trainable parameter set from it with a seeded RNG so runs
are reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from .autograd import Tensor
from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Widths and structural switches for the retrieval model.

    ``text_dim`` / ``video_dim`` are the raw feature widths coming off disk;
    ``dim`` is the shared embedding width used everywhere downstream;
    ``proj_dim`` is the width of the query/key/value projections inside
    event refinement.
    """

    text_dim: int = 512
    video_dim: int = 512
    dim: int = 256
    proj_dim: int = 256
    heads: int = 4
    text_layers: int = 1
    video_layers: int = 1
    max_len: int = 512
    epsilon: float = 0.90
    use_event_segmentation: bool = True
    use_event_refinement: bool = True
    equal_events: int = 32  # event count when segmentation is switched off
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("text_dim", "video_dim", "dim", "proj_dim", "heads",
                     "text_layers", "video_layers", "max_len", "equal_events"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} must divide evenly into {self.heads} heads")
        if not -1.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [-1, 1], got {self.epsilon}")
        if self.ln_eps <= 0:
            raise ConfigError(f"ln_eps must be positive, got {self.ln_eps}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AffineParams:
    """A weight matrix plus bias row: x @ weight + bias."""

    weight: Tensor
    bias: Tensor

    @staticmethod
    def create(rng: np.random.Generator, fan_in: int, fan_out: int) -> "AffineParams":
        bound = 1.0 / np.sqrt(fan_in)
        return AffineParams(
            weight=Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True),
            bias=Tensor(np.zeros(fan_out), requires_grad=True),
        )


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @staticmethod
    def create(dim: int) -> "LayerNormParams":
        return LayerNormParams(
            gamma=Tensor(np.ones(dim), requires_grad=True),
            beta=Tensor(np.zeros(dim), requires_grad=True),
        )


def matrix_param(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    """A bias-free projection matrix with the same uniform fan-in init."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def _walk(prefix: str, obj) -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, AffineParams):
        yield f"{prefix}.weight", obj.weight
        yield f"{prefix}.bias", obj.bias
    elif isinstance(obj, LayerNormParams):
        yield f"{prefix}.gamma", obj.gamma
        yield f"{prefix}.beta", obj.beta
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _walk(f"{prefix}.{i}", item)
    elif hasattr(obj, "__dataclass_fields__"):
        for f in fields(obj):
            yield from _walk(f"{prefix}.{f.name}" if prefix else f.name, getattr(obj, f.name))


@dataclass
class ModelParams:
    """Every trainable tensor in the pipeline, grouped by stage."""

    config: ModelConfig
    text_encoder: "object"
    video_encoder: "object"
    refiner: "object"

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, t in _walk("text_encoder", self.text_encoder):
            out[name] = t
        for name, t in _walk("video_encoder", self.video_encoder):
            out[name] = t
        if self.refiner is not None:
            for name, t in _walk("refiner", self.refiner):
                out[name] = t
        return out

    def zero_grads(self) -> None:
        for t in self.named_parameters().values():
            t.zero_grad()


def init_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Build all parameters from a single seed.

    Refinement parameters are only created when the refinement stage is
    enabled, so a refinement-free model has no dead weights in checkpoints.
    """
    from .encoders import init_text_encoder, init_video_encoder
    from .refinement import init_refiner

    rng = np.random.default_rng(seed)
    text = init_text_encoder(config, rng)
    video = init_video_encoder(config, rng)
    refiner = init_refiner(config, rng) if config.use_event_refinement else None
    return ModelParams(config=config, text_encoder=text, video_encoder=video, refiner=refiner)
