"""Frozen per-layer keep-masks (``True`` = weight may be nonzero)."""

from __future__ import annotations

from collections.abc import Mapping
from types import MappingProxyType

import numpy as np

from .errors import ShapeError
from .tensors import array_digest


def _frozen(a) -> np.ndarray:
    m = np.array(a, dtype=bool, copy=True)
    m.flags.writeable = False
    return m


class SparsityMask(Mapping):
    """Immutable mapping ``layer name -> bool keep-matrix``.

    Arrays are copied and made read-only on construction, so a mask cannot be
    mutated after it is frozen; ``digest`` hashes names, shapes and bits.
    """

    def __init__(self, layers: Mapping):
        self._layers = MappingProxyType({name: _frozen(layers[name]) for name in sorted(layers)})

    def __getitem__(self, name) -> np.ndarray:
        return self._layers[name]

    def __iter__(self):
        return iter(self._layers)

    def __len__(self) -> int:
        return len(self._layers)

    def __eq__(self, other) -> bool:
        return isinstance(other, SparsityMask) and self.digest() == other.digest()

    def __hash__(self):
        return hash(self.digest())

    def __repr__(self) -> str:
        return f"SparsityMask({len(self)} layers, sparsity={self.sparsity():.4f})"

    @classmethod
    def dense(cls, shapes: Mapping) -> "SparsityMask":
        return cls({k: np.ones(s, dtype=bool) for k, s in shapes.items()})

    @classmethod
    def from_weights(cls, weights: Mapping, names=None) -> "SparsityMask":
        """Keep exactly the currently nonzero entries."""
        names = sorted(weights) if names is None else names
        return cls({k: np.asarray(weights[k]) != 0 for k in names})

    def digest(self) -> str:
        h = [name.encode() for name in self._layers]
        return array_digest(np.frombuffer(b"\0".join(h), dtype=np.uint8), *self._layers.values())

    def layer_sparsity(self, name) -> float:
        m = self._layers[name]
        return 1.0 - np.count_nonzero(m) / m.size

    def sparsity(self) -> float:
        """Zero fraction over all layers, weighted by size."""
        total = sum(m.size for m in self._layers.values())
        if total == 0:
            return 0.0
        return 1.0 - sum(int(np.count_nonzero(m)) for m in self._layers.values()) / total

    def apply(self, weights: Mapping) -> dict:
        """Return a copy of ``weights`` with masked entries zeroed (layers not in the mask pass through)."""
        out = dict(weights)
        for name, m in self._layers.items():
            w = np.asarray(weights[name])
            if w.shape != m.shape:
                raise ShapeError(f"layer {name}: mask shape {m.shape} != weight shape {w.shape}")
            out[name] = np.where(m, w, np.zeros((), dtype=w.dtype)).astype(w.dtype)
        return out

    def covers(self, other: "SparsityMask") -> bool:
        """True if every zero of ``other`` is also a zero here (zeros never resurrect)."""
        if set(other) - set(self):
            return False
        return all(not np.any(self._layers[k] & ~other[k]) for k in other)
