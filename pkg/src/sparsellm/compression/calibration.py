"""Calibration activations and the layer Hessian built from them."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from ..errors import ShapeError, SingularHessianError

DEFAULT_SAMPLES = 128
DEFAULT_SEQ_LEN = 128
DEFAULT_DAMP = 0.01


@dataclass(frozen=True)
class CalibrationSet:
    """Per-layer input activations, each an (n_tokens, in_features) matrix."""

    inputs: Mapping
    n_samples: int
    seq_len: int
    _frozen: Mapping = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_samples < 1 or self.seq_len < 1:
            raise ShapeError(f"calibration needs >= 1 sample and seq_len >= 1, got {self.n_samples}x{self.seq_len}")
        frozen = {}
        for name, x in self.inputs.items():
            a = np.array(x, dtype=np.float32)
            if a.ndim != 2 or a.shape[0] < 1:
                raise ShapeError(f"layer {name}: calibration inputs must be a non-empty 2-D matrix, got {a.shape}")
            a.flags.writeable = False
            frozen[name] = a
        object.__setattr__(self, "_frozen", MappingProxyType(frozen))
        object.__setattr__(self, "inputs", self._frozen)

    def __getitem__(self, name) -> np.ndarray:
        try:
            return self.inputs[name]
        except KeyError:
            raise ShapeError(f"no calibration activations for layer {name}") from None

    def check(self, name, w) -> np.ndarray:
        x = self[name]
        if x.shape[1] != np.shape(w)[1]:
            raise ShapeError(f"layer {name}: weight has {np.shape(w)[1]} inputs, calibration has {x.shape[1]}")
        return x


def hessian(x, damp: float = DEFAULT_DAMP) -> np.ndarray:
    """``XᵀX + damp·mean(diag)·I`` in float64."""
    x = np.asarray(x, dtype=np.float64)
    if damp < 0:
        raise ValueError("damp must be >= 0")
    h = x.T @ x
    mean_diag = float(np.mean(np.diag(h)))
    h[np.diag_indices_from(h)] += damp * (mean_diag if mean_diag > 0 else 1.0)
    return h


def inverse_hessian(x, damp: float = DEFAULT_DAMP) -> np.ndarray:
    h = hessian(x, damp)
    try:
        chol = np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        raise SingularHessianError(f"Hessian is not positive definite with damp={damp}; increase damp") from None
    inv_l = np.linalg.solve(chol, np.eye(h.shape[0]))
    return inv_l.T @ inv_l


def reconstruction_error(w, w_hat, x) -> float:
    """Squared layer-output error ``‖W Xᵀ − Ŵ Xᵀ‖²`` on the calibration inputs."""
    d = np.asarray(w, dtype=np.float64) - np.asarray(w_hat, dtype=np.float64)
    r = np.asarray(x, dtype=np.float64) @ d.T
    return float(np.sum(r * r))
