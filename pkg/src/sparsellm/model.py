"""Toy decoder-only transformer: configuration, parameter naming and initialisation.

Parameters are a flat ``dict[str, np.ndarray]`` (float32). Linear weights are
stored ``(out_features, in_features)``. The same dictionary drives the torch
training model and the numpy inference runtime.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError
from .tensors import FLOAT, Rng


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 512
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_ctx: int = 1024
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ShapeError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if min(self.vocab, self.d_model, self.n_heads, self.n_layers, self.d_ff, self.max_ctx) < 1:
            raise ShapeError("model dimensions must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(**d)


ATTN = ("q", "k", "v", "o")
MLP = ("up", "down")


def linear_names(cfg: ModelConfig) -> list[str]:
    """Prunable/quantizable linear layers in execution order (the output head excluded)."""
    names = []
    for i in range(cfg.n_layers):
        names += [f"layers.{i}.attn.{p}" for p in ATTN]
        names += [f"layers.{i}.mlp.{p}" for p in MLP]
    return names


def param_shapes(cfg: ModelConfig) -> dict:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"embed.tok": (cfg.vocab, d), "embed.pos": (cfg.max_ctx, d)}
    for i in range(cfg.n_layers):
        shapes[f"layers.{i}.norm1"] = (d,)
        for p in ATTN:
            shapes[f"layers.{i}.attn.{p}"] = (d, d)
        shapes[f"layers.{i}.norm2"] = (d,)
        shapes[f"layers.{i}.mlp.up"] = (f, d)
        shapes[f"layers.{i}.mlp.down"] = (d, f)
    shapes["norm_f"] = (d,)
    shapes["head"] = (cfg.vocab, d)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Scaled-normal init; residual output projections shrink with depth."""
    rng = Rng(seed).substream("init")
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.ones(shape, dtype=FLOAT)
        elif name.startswith("embed."):
            params[name] = rng.normal(shape, 0.02)
        else:
            std = 1.0 / math.sqrt(shape[1])
            if name.endswith((".o", ".down")):
                std /= math.sqrt(2 * cfg.n_layers)
            params[name] = rng.normal(shape, std)
    return params


def check_params(cfg: ModelConfig, params) -> None:
    shapes = param_shapes(cfg)
    missing = sorted(set(shapes) - set(params))
    if missing:
        raise ShapeError(f"missing parameters: {', '.join(missing)}")
    for name, shape in shapes.items():
        if tuple(np.shape(params[name])) != shape:
            raise ShapeError(f"parameter {name}: expected shape {shape}, got {np.shape(params[name])}")
