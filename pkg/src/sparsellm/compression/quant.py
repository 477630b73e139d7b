"""INT8 post-training quantization: activation smoothing, error-compensated rounding, layer skipping."""

from __future__ import annotations

import enum
import itertools
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateError, ShapeError
from ..tensors import FLOAT, as_matrix, kurtosis
from .calibration import DEFAULT_DAMP, CalibrationSet, inverse_hessian, reconstruction_error

QMAX = 127
# rows with at most this many nonzero weights get an exhaustive floor/ceil search
EXACT_ROUNDING_LIMIT = 12


class Granularity(str, enum.Enum):
    PER_CHANNEL = "per-channel"
    PER_TENSOR = "per-tensor"


@dataclass(frozen=True)
class QuantRecipe:
    alpha: float = 0.5
    skip_top_k_kurtosis: int = 0
    group: Granularity = Granularity.PER_CHANNEL
    damp: float = DEFAULT_DAMP

    def __post_init__(self):
        object.__setattr__(self, "group", Granularity(self.group))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.skip_top_k_kurtosis < 0:
            raise ValueError("skip_top_k_kurtosis must be >= 0")
        if self.damp <= 0:
            raise ValueError("damp must be > 0")


@dataclass(frozen=True)
class QuantizedMatrix:
    """``W ≈ (q · scales[:, None]) / smoothing[None, :]``; inputs quantize with ``act_scale``."""

    q: np.ndarray
    scales: np.ndarray
    smoothing: np.ndarray | None = None
    act_scale: float | None = None

    def __post_init__(self):
        q = np.asarray(self.q)
        if q.dtype != np.int8 or q.ndim != 2:
            raise ShapeError(f"q must be a 2-D int8 matrix, got {q.dtype} {q.shape}")
        if np.any(q == -128):
            raise ShapeError("q must lie in [-127, 127]")
        s = np.asarray(self.scales, dtype=FLOAT)
        if s.shape != (q.shape[0],) or np.any(s <= 0):
            raise ShapeError(f"need {q.shape[0]} positive row scales, got shape {s.shape}")
        object.__setattr__(self, "scales", s)
        if self.smoothing is not None:
            sm = np.asarray(self.smoothing, dtype=FLOAT)
            if sm.shape != (q.shape[1],) or np.any(sm <= 0):
                raise ShapeError(f"need {q.shape[1]} positive smoothing factors, got shape {sm.shape}")
            object.__setattr__(self, "smoothing", sm)
        if self.act_scale is not None and not self.act_scale > 0:
            raise ShapeError("act_scale must be positive")

    @property
    def shape(self):
        return self.q.shape

    def dequantize(self) -> np.ndarray:
        """Effective weight in the original (unsmoothed) input space."""
        w = self.q.astype(np.float64) * self.scales.astype(np.float64)[:, None]
        if self.smoothing is not None:
            w = w / self.smoothing.astype(np.float64)[None, :]
        return w.astype(FLOAT)

    def quantize_input(self, x) -> np.ndarray:
        """Smooth and round activations to int8 with the static per-tensor scale."""
        if self.act_scale is None:
            raise ShapeError("matrix carries no activation scale")
        x = np.asarray(x, dtype=np.float32)
        if self.smoothing is not None:
            x = x / self.smoothing
        return np.clip(np.rint(x / np.float32(self.act_scale)), -QMAX, QMAX).astype(np.int8)


def channel_scales(w, group: Granularity | str = Granularity.PER_CHANNEL) -> np.ndarray:
    """absmax/127 per output row (or one shared value); all-zero rows get scale 1."""
    a = np.abs(np.asarray(w, dtype=np.float64))
    if Granularity(group) == Granularity.PER_TENSOR:
        m = np.full(a.shape[0], a.max())
    else:
        m = a.max(axis=1)
    return np.where(m > 0, m / QMAX, 1.0).astype(FLOAT)


def round_to_grid(w, scales) -> np.ndarray:
    """Round-half-even onto the symmetric int8 grid (no error compensation)."""
    s = np.asarray(scales, dtype=np.float64)[:, None]
    return np.clip(np.rint(np.asarray(w, dtype=np.float64) / s), -QMAX, QMAX).astype(np.int8)


def smooth_activations(w, calib, alpha: float = 0.5, layer: str | None = None):
    """Migrate activation range into the weights: ``W' = W·s`` with
    ``s_j = max|X_j|^α / max|W_:,j|^(1−α)``; inputs are divided by ``s``.

    Channels where either maximum is zero keep ``s_j = 1``.
    Returns ``(W', s)``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    w = as_matrix(w)
    x = calib.check(layer, w) if isinstance(calib, CalibrationSet) else as_matrix(calib)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"weight has {w.shape[1]} inputs but calibration has {x.shape[1]}")
    xmax = np.max(np.abs(x.astype(np.float64)), axis=0)
    wmax = np.max(np.abs(w.astype(np.float64)), axis=0)
    ok = (xmax > 0) & (wmax > 0)
    s = np.ones(w.shape[1], dtype=np.float64)
    s[ok] = xmax[ok] ** alpha / wmax[ok] ** (1.0 - alpha)
    return (w.astype(np.float64) * s[None, :]).astype(FLOAT), s.astype(FLOAT)


def _exact_row(w, scale, h, support):
    """Exhaustive floor/ceil choice on ``support`` minimising ``(w−ŵ)ᵀ H (w−ŵ)``."""
    z = w[support] / scale
    lo = np.clip(np.floor(z), -QMAX, QMAX)
    hi = np.clip(np.ceil(z), -QMAX, QMAX)
    hs = h[np.ix_(support, support)]
    best, best_cost = None, np.inf
    for bits in itertools.product((0, 1), repeat=support.size):
        q = np.where(np.asarray(bits, dtype=bool), hi, lo)
        d = w[support] - q * scale
        cost = float(d @ hs @ d)
        if cost < best_cost:
            best, best_cost = q, cost
    return best


def _gptq_sweep(w, scales, hinv, keep):
    """Column-by-column rounding with error feedback through the Cholesky factor of H⁻¹."""
    w = w.copy()
    u = np.linalg.cholesky(hinv).T  # upper: hinv = uᵀu
    q = np.zeros(w.shape, dtype=np.float64)
    s = scales.astype(np.float64)
    for j in range(w.shape[1]):
        col = w[:, j]
        qj = np.clip(np.rint(col / s), -QMAX, QMAX)
        qj[~keep[:, j]] = 0.0
        q[:, j] = qj
        err = (col - qj * s) / u[j, j]
        w[:, j + 1 :] -= np.outer(err, u[j, j + 1 :])
    return q


def quantize_gptq(w, calib, damp: float = DEFAULT_DAMP, layer: str | None = None,
                  group: Granularity | str = Granularity.PER_CHANNEL,
                  exact_limit: int = EXACT_ROUNDING_LIMIT) -> QuantizedMatrix:
    """Error-compensated int8 rounding with per-row absmax scales.

    Zero weights are pinned to ``q = 0`` so a pruning mask survives exactly.
    Rows with at most ``exact_limit`` nonzeros take the exact best floor/ceil
    combination under the calibration objective ``‖WX − ŴX‖²``; the rest go
    through the sequential column sweep, where each column's rounding error is
    pushed onto the columns not yet quantized.
    """
    w = as_matrix(w)
    x = calib.check(layer, w) if isinstance(calib, CalibrationSet) else as_matrix(calib)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"weight has {w.shape[1]} inputs but calibration has {x.shape[1]}")
    scales = channel_scales(w, group)
    keep = w != 0
    w64 = w.astype(np.float64)
    x64 = x.astype(np.float64)
    h_exact = x64.T @ x64
    q = np.zeros(w.shape, dtype=np.float64)
    small = keep.sum(axis=1) <= exact_limit
    for i in np.flatnonzero(small):
        support = np.flatnonzero(keep[i])
        if support.size:
            q[i, support] = _exact_row(w64[i], float(scales[i]), h_exact, support)
    if not small.all():
        rows = np.flatnonzero(~small)
        q[rows] = _gptq_sweep(w64[rows], scales[rows], inverse_hessian(x, damp), keep[rows])
    return QuantizedMatrix(q.astype(np.int8), scales)


def quantize_layer(w, x, recipe: QuantRecipe) -> QuantizedMatrix:
    """Smoothing, then error-compensated rounding, plus a static activation scale."""
    w = as_matrix(w)
    x = as_matrix(x)
    w_s, s = smooth_activations(w, x, recipe.alpha)
    x_s = (x / s[None, :]).astype(FLOAT)
    qm = quantize_gptq(w_s, x_s, recipe.damp, group=recipe.group)
    amax = float(np.max(np.abs(x_s)))
    act = amax / QMAX if amax > 0 else 1.0
    return QuantizedMatrix(qm.q, qm.scales, s, act)


def weight_kurtosis(w) -> float:
    """Kurtosis of a layer's weights; constant layers rank lowest (-inf)."""
    try:
        return kurtosis(w)
    except DegenerateError:
        return float("-inf")


def select_skip_layers(weights: Mapping, k: int) -> set:
    """Names of the ``k`` layers with the highest weight kurtosis (ties by name)."""
    if not 0 <= k <= len(weights):
        raise ValueError(f"k must be in [0, {len(weights)}], got {k}")
    ranked = sorted(weights, key=lambda n: (-weight_kurtosis(weights[n]), n))
    return set(ranked[:k])


@dataclass(frozen=True)
class QuantReport:
    name: str
    skipped: bool
    kurtosis: float
    recon_error: float | None
    sparsity: float


def quantize_weights(weights: Mapping, calib: CalibrationSet, recipe: QuantRecipe, names=None):
    """Quantize each named layer except the top-kurtosis ones.

    Returns ``({name: QuantizedMatrix}, skipped_names, [QuantReport])``.
    """
    names = sorted(weights) if names is None else sorted(names)
    skip = select_skip_layers({n: weights[n] for n in names}, recipe.skip_top_k_kurtosis)
    out, reports = {}, []
    for name in names:
        w = as_matrix(weights[name])
        x = calib.check(name, w)
        kurt = weight_kurtosis(w)
        if name in skip:
            reports.append(QuantReport(name, True, kurt, None, 1.0 - np.count_nonzero(w) / w.size))
            continue
        qm = quantize_layer(w, x, recipe)
        out[name] = qm
        err = reconstruction_error(w, qm.dequantize(), x)
        reports.append(QuantReport(name, False, kurt, err, 1.0 - np.count_nonzero(qm.q) / qm.q.size))
    return out, skip, reports
