"""Per-layer sparsity targets: uniform, or outlier-weighted (OWL)."""

from __future__ import annotations

import enum
from collections.abc import Mapping
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from ..errors import ShapeError

OWL_LAMBDA = 0.08
OWL_M = 5.0


class ProfileKind(str, enum.Enum):
    UNIFORM = "uniform"
    OWL = "owl"


@dataclass(frozen=True)
class SparsityProfile:
    kind: ProfileKind
    target: float
    per_layer: Mapping
    owl_lambda: float = OWL_LAMBDA
    owl_m: float = OWL_M
    notice: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "per_layer", MappingProxyType(dict(sorted(self.per_layer.items()))))
        if not 0.0 <= self.target < 1.0:
            raise ValueError(f"target sparsity must be in [0, 1), got {self.target}")

    def weighted_mean(self, sizes: Mapping) -> float:
        total = sum(sizes[k] for k in self.per_layer)
        return sum(self.per_layer[k] * sizes[k] for k in self.per_layer) / total


def _sizes(weights_or_sizes: Mapping) -> dict:
    return {k: (v if isinstance(v, (int, np.integer)) else int(np.size(v))) for k, v in weights_or_sizes.items()}


def profile_uniform(layers: Mapping, target: float) -> SparsityProfile:
    """``layers`` maps names to weights or to parameter counts."""
    return SparsityProfile(ProfileKind.UNIFORM, target, {k: float(target) for k in layers})


def outlier_ratio(w, x, owl_m: float = OWL_M) -> float:
    """Fraction of ``|W| ⊙ mean|X|`` (per input channel) above ``owl_m`` times its mean."""
    w = np.abs(np.asarray(w, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"activations {x.shape} do not match weight inputs {w.shape}")
    score = w * np.mean(np.abs(x), axis=0)[None, :]
    mean = score.mean()
    if mean == 0.0:
        return 0.0
    return float(np.count_nonzero(score > owl_m * mean)) / score.size


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0
        i = j + 1
    return ranks


def owl_sparsities(ratios: Mapping, sizes: Mapping, target: float, owl_lambda: float = OWL_LAMBDA) -> dict:
    """Map outlier ratios to per-layer sparsities with weighted mean ``target``.

    Layers with more outliers get lower sparsity: ``target + λ(1 − 2r)`` where
    ``r`` is the layer's rank in [0, 1]. The positive or negative deviations are
    then shrunk by a common factor so the size-weighted mean is exactly the
    target while every value stays within ``target ± λ``.
    """
    names = sorted(ratios)
    d = np.array([ratios[k] for k in names], dtype=np.float64)
    n = np.array([sizes[k] for k in names], dtype=np.float64)
    if len(names) == 1:
        return {names[0]: float(target)}
    r = _average_ranks(d) / (len(names) - 1)
    dev = owl_lambda * (1.0 - 2.0 * r)
    pos = float(np.sum(n * np.maximum(dev, 0.0)))
    neg = float(np.sum(n * np.maximum(-dev, 0.0)))
    if pos > neg:
        dev = np.where(dev > 0, dev * (neg / pos), dev)
    elif neg > pos:
        dev = np.where(dev < 0, dev * (pos / neg), dev)
    return {k: float(target + v) for k, v in zip(names, dev)}


def profile_owl(calib, weights: Mapping, target: float, owl_lambda: float = OWL_LAMBDA,
                owl_m: float = OWL_M) -> SparsityProfile:
    """Outlier-weighted profile; ``calib`` is a CalibrationSet or a mapping of layer inputs.

    If every layer has the same outlier ratio the uniform profile is returned
    with a notice. ``owl_lambda`` is capped at ``target`` so no layer goes
    below zero sparsity.
    """
    if not 0.0 <= target < 1.0 or owl_lambda < 0 or owl_m <= 0:
        raise ValueError(f"invalid OWL parameters target={target} lambda={owl_lambda} m={owl_m}")
    if target + owl_lambda >= 1.0:
        raise ValueError(f"target + owl_lambda must be < 1, got {target} + {owl_lambda}")
    inputs = getattr(calib, "inputs", calib)
    ratios = {k: outlier_ratio(weights[k], inputs[k], owl_m) for k in sorted(weights)}
    if len(set(ratios.values())) <= 1:
        uniform = profile_uniform(weights, target)
        return SparsityProfile(ProfileKind.OWL, target, uniform.per_layer, owl_lambda, owl_m,
                               notice="all layers share one outlier ratio; using the uniform profile")
    lam = min(owl_lambda, target)
    per_layer = owl_sparsities(ratios, _sizes(weights), target, lam)
    notice = None if lam == owl_lambda else f"owl_lambda capped at target ({lam})"
    return SparsityProfile(ProfileKind.OWL, target, per_layer, owl_lambda, owl_m, notice=notice)
