"""One-shot pruning: magnitude ranking and second-order (OBS) pruning with weight refit."""

from __future__ import annotations

import enum
import itertools
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from ..errors import ScheduleError, ShapeError
from ..masks import SparsityMask
from ..tensors import FLOAT, as_matrix
from .calibration import DEFAULT_DAMP, CalibrationSet, inverse_hessian, reconstruction_error
from .profiles import SparsityProfile

# below this many candidate prune sets per row, OBS selection is exhaustive
EXACT_SEARCH_LIMIT = 4096
# weights removed per greedy OBS round before the inverse Hessian is downdated
OBS_ROUND = 16


class Scope(str, enum.Enum):
    PER_ROW = "per-row"
    PER_LAYER = "per-layer"


def prune_count(s: float, n: int) -> int:
    """Number of weights to zero: ``s·n`` rounded half-to-even."""
    if not 0.0 <= s < 1.0:
        raise ValueError(f"sparsity must be in [0, 1), got {s}")
    return int(np.rint(s * n))


def _check_keep(keep, shape) -> np.ndarray | None:
    if keep is None:
        return None
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != shape:
        raise ShapeError(f"existing mask shape {keep.shape} != weight shape {shape}")
    return keep


def _row_counts(score: np.ndarray, s: float, scope: Scope) -> np.ndarray:
    """How many entries each row loses; per-layer scope allocates by global score rank."""
    rows, cols = score.shape
    if Scope(scope) == Scope.PER_ROW:
        return np.full(rows, prune_count(s, cols), dtype=np.int64)
    k = prune_count(s, score.size)
    order = np.argsort(score, axis=None, kind="stable")[:k]
    return np.bincount(order // cols, minlength=rows).astype(np.int64)


def prune_magnitude(w, s: float, scope: Scope | str = Scope.PER_LAYER, keep=None):
    """Zero the ``round(s·n)`` smallest-magnitude entries per scope.

    Ties go to the lowest flat index. Entries already excluded by ``keep`` are
    zeroed first and count toward the target. Returns ``(weights, keep_mask)``.
    """
    w = as_matrix(w)
    keep = _check_keep(keep, w.shape)
    mag = np.abs(w.astype(np.float64))
    if keep is not None:
        mag[~keep] = -1.0
    counts = _row_counts(mag, s, Scope(scope))
    order = np.argsort(mag, axis=1, kind="stable")
    mask = np.ones(w.shape, dtype=bool)
    for i, k in enumerate(counts):
        mask[i, order[i, :k]] = False
    if keep is not None and np.any(~keep & mask):
        raise ScheduleError("target sparsity is below the existing mask's sparsity")
    return np.where(mask, w, FLOAT(0)).astype(FLOAT), mask


def _refit(w: np.ndarray, hinv: np.ndarray, pruned: np.ndarray) -> np.ndarray:
    """Exact least-squares refit: ``w_S -= Hinv_SP (Hinv_PP)^-1 w_P`` and ``w_P = 0``."""
    out = w.copy()
    if pruned.size:
        coef = np.linalg.solve(hinv[np.ix_(pruned, pruned)], w[pruned])
        out -= hinv[:, pruned] @ coef
        out[pruned] = 0.0
    return out


def _exact_prune_set(w, hinv, free, forced, k_free):
    best, best_cost = None, math.inf
    for combo in itertools.combinations(free, k_free):
        p = np.concatenate([forced, np.asarray(combo, dtype=np.int64)])
        cost = float(w[p] @ np.linalg.solve(hinv[np.ix_(p, p)], w[p])) if p.size else 0.0
        if best is None or cost < best_cost - 1e-12 * max(1.0, abs(best_cost)):
            best, best_cost = p, cost
    return np.sort(best)


def _greedy_prune_set(w, hinv, forced, k):
    """Rounds of lowest saliency ``w²/[H⁻¹]_jj`` with the weights and inverse Hessian updated in between."""
    w = w.copy()
    h = hinv.copy()
    alive = np.ones(w.size, dtype=bool)
    if forced.size:
        w = _refit(w, h, forced)
        h -= h[:, forced] @ np.linalg.solve(h[np.ix_(forced, forced)], h[forced, :])
        alive[forced] = False
    remaining = k - forced.size
    while remaining > 0:
        idx = np.flatnonzero(alive)
        diag = np.maximum(np.diag(h)[idx], 1e-300)
        sal = w[idx] ** 2 / diag
        take = idx[np.argsort(sal, kind="stable")[: min(OBS_ROUND, remaining)]]
        w = _refit(w, h, take)
        h -= h[:, take] @ np.linalg.solve(h[np.ix_(take, take)], h[take, :])
        alive[take] = False
        remaining -= take.size
    return np.sort(np.flatnonzero(~alive))


def prune_obs(w, calib: CalibrationSet | np.ndarray, s: float, damp: float = DEFAULT_DAMP,
              scope: Scope | str = Scope.PER_ROW, keep=None, layer: str | None = None,
              exact_limit: int = EXACT_SEARCH_LIMIT):
    """Second-order pruning with an exact refit of the surviving weights.

    ``calib`` is either a CalibrationSet (with ``layer``) or the raw (tokens, in)
    input matrix. Each row's prune set minimises the OBS cost
    ``w_Pᵀ [H⁻¹_PP]⁻¹ w_P``: exhaustively when the number of candidate sets is at
    most ``exact_limit``, otherwise by greedy saliency rounds. The surviving
    weights are then refit in closed form, which is the least-squares optimum
    of ``‖WX − ŴX‖²`` (plus damping) for that prune set.
    Returns ``(weights, keep_mask)``.
    """
    w = as_matrix(w)
    x = calib.check(layer, w) if isinstance(calib, CalibrationSet) else as_matrix(calib)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"weight has {w.shape[1]} inputs but calibration has {x.shape[1]}")
    if not 0.0 <= s < 1.0:
        raise ValueError(f"sparsity must be in [0, 1), got {s}")
    keep = _check_keep(keep, w.shape)
    hinv = inverse_hessian(x, damp)
    w64 = w.astype(np.float64)
    score = w64**2 / np.diag(hinv)[None, :]
    if keep is not None:
        score[~keep] = -1.0
    counts = _row_counts(score, s, Scope(scope))
    out = np.zeros_like(w64)
    mask = np.ones(w.shape, dtype=bool)
    n = w.shape[1]
    for i in range(w.shape[0]):
        row = w64[i]
        forced = np.flatnonzero(~keep[i]) if keep is not None else np.zeros(0, dtype=np.int64)
        k = int(counts[i])
        if forced.size > k:
            raise ScheduleError(f"row {i}: existing mask already prunes {forced.size} > {k} weights")
        free = np.setdiff1d(np.arange(n), forced)
        if math.comb(free.size, k - forced.size) <= exact_limit:
            pruned = _exact_prune_set(row, hinv, free, forced, k - forced.size)
        else:
            pruned = _greedy_prune_set(row, hinv, forced, k)
        out[i] = _refit(row, hinv, pruned)
        mask[i, pruned] = False
    return out.astype(FLOAT), mask


# ---------------------------------------------------------------------------
# model-level pruning
# ---------------------------------------------------------------------------


class Method(str, enum.Enum):
    MAGNITUDE = "magnitude"
    OBS = "obs"


@dataclass(frozen=True)
class LayerReport:
    name: str
    target: float
    sparsity: float
    recon_error: float | None


def prune_weights(weights: Mapping, profile: SparsityProfile, method: Method | str = Method.OBS,
                  calib: CalibrationSet | None = None, damp: float = DEFAULT_DAMP,
                  scope: Scope | str = Scope.PER_ROW, mask: SparsityMask | None = None):
    """Prune every layer named in ``profile`` to its target sparsity.

    ``mask`` holds zeros from an earlier stage; they stay zero. Returns
    ``(new_weights, SparsityMask, [LayerReport])``; the mask covers only the
    profiled layers.
    """
    method = Method(method)
    if method == Method.OBS and calib is None:
        raise ShapeError("OBS pruning needs calibration activations")
    out = dict(weights)
    keeps, reports = {}, []
    for name in sorted(profile.per_layer):
        w = as_matrix(weights[name])
        s = profile.per_layer[name]
        prior = mask[name] if mask is not None and name in mask else None
        if method == Method.MAGNITUDE:
            new, keep = prune_magnitude(w, s, scope, keep=prior)
        else:
            new, keep = prune_obs(w, calib, s, damp, scope, keep=prior, layer=name)
        err = reconstruction_error(w, new, calib[name]) if calib is not None and name in calib.inputs else None
        out[name] = new
        keeps[name] = keep
        reports.append(LayerReport(name, s, 1.0 - np.count_nonzero(keep) / keep.size, err))
    return out, SparsityMask(keeps), reports


@dataclass(frozen=True)
class StageResult:
    target: float
    weights: dict
    mask: SparsityMask
    reports: list
    metrics: dict


def iterative_prune_schedule(weights: Mapping, targets: Sequence[float],
                             trainer: Callable[[dict, SparsityMask], tuple],
                             profile_for: Callable[[float], SparsityProfile],
                             method: Method | str = Method.MAGNITUDE,
                             calib_for: Callable[[dict], CalibrationSet] | None = None,
                             damp: float = DEFAULT_DAMP, scope: Scope | str = Scope.PER_ROW) -> list:
    """Prune, train to convergence, prune the survivors further, train again.

    ``trainer(weights, mask)`` returns ``(trained_weights, metrics)`` and must
    keep masked entries at zero. ``profile_for(target)`` builds the per-layer
    targets for one stage; ``calib_for(weights)`` re-collects activations from
    the current model when OBS is used. Targets must be strictly increasing.
    """
    targets = list(targets)
    if not targets:
        raise ScheduleError("empty sparsity schedule")
    if any(not 0.0 <= t < 1.0 for t in targets):
        raise ScheduleError(f"targets must lie in [0, 1): {targets}")
    if any(b <= a for a, b in zip(targets, targets[1:])):
        raise ScheduleError(f"sparsity targets must be strictly increasing, got {targets}")
    stages = []
    current, mask = dict(weights), None
    for t in targets:
        calib = calib_for(current) if calib_for is not None else None
        current, new_mask, reports = prune_weights(current, profile_for(t), method, calib, damp, scope, mask)
        if mask is not None and not new_mask.covers(mask):
            raise ScheduleError("pruning stage resurrected a previously pruned weight")
        mask = new_mask
        current, metrics = trainer(current, mask)
        current = dict(current)
        stages.append(StageResult(t, current, mask, reports, dict(metrics)))
    return stages
