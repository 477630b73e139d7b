"""Matrix kernels over the bitmask-compressed format, plus dense references.

Every kernel fixes its reduction order per output element: blocks in storage
order, then lanes in lane order. For a given row that is plain column order,
which is also what the sequential dense kernels use, so the float sparse and
dense paths agree bit-for-bit on the same (decoded) weights.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from ..codec import Layout, SparseMatrix, StorageDtype, padded_shape
from ..errors import ShapeError
from ..tensors import FLOAT
from ._simd import (
    HAS_VNNI,
    expand_dot_i8_pairs_x1,
    expand_dot_i8_pairs_x4,
    expand_dot_i8_row_x1,
    expand_mul_compress_f32,
    expand_mul_split_f32,
    rowpair_dot_i8_vnni,
)

# int32 lane partials stay exact while every lane sees at most 2**31 / 128**2
# products; the narrowest layout (TILE, 16 lanes per row) reaches that at 2**21
# columns. Wider matrices use the int64 scalar path.
SIMD_I8_MAX_COLS = 1 << 21
# the VNNI path adds up to 4 * 255 * 128 per lane per 32 columns
VNNI_MAX_COLS = 1 << 19
_DENSE_I8_CHUNK = 1 << 16
# a single int32 accumulator per output holds cols * 128**2 while cols <= 2**17
_GEMM_I32_MAX_COLS = 1 << 17


# ---------------------------------------------------------------------------
# float32 SIMD paths
# ---------------------------------------------------------------------------


@njit(cache=True)
def _sum_stream(buf, n):
    acc = np.float32(0.0)
    for j in range(n):
        acc += buf[j]
    return acc


@njit(cache=True)
def _sum_two_streams(a, na, b, nb):
    # two independent sequential chains interleaved, for instruction-level parallelism
    sa = np.float32(0.0)
    sb = np.float32(0.0)
    n = min(na, nb)
    for j in range(n):
        sa += a[j]
        sb += b[j]
    for j in range(n, na):
        sa += a[j]
    for j in range(n, nb):
        sb += b[j]
    return sa, sb


@njit(cache=True)
def _gemv_rowpair_f32(masks, vals, x, pr, pc):
    groups = pc // 8
    y = np.zeros(pr, np.float32)
    pa = np.empty(pc, np.float32)
    pb = np.empty(pc, np.float32)
    ptr = 0
    for p in range(pr // 2):
        ca = 0
        cb = 0
        base = p * groups
        for g in range(groups):
            ca, cb, ptr = expand_mul_split_f32(vals, ptr, np.int64(masks[base + g]), x, 8 * g, pa, ca, pb, cb)
        y[2 * p], y[2 * p + 1] = _sum_two_streams(pa, ca, pb, cb)
    return y


@njit(cache=True)
def _gemv_tile_f32(masks, vals, x, pr, pc, tr, tc):
    segs = tc // 16
    ntj = pc // tc
    y = np.zeros(pr, np.float32)
    buf = np.empty((tr, pc), np.float32)
    cnt = np.zeros(tr, np.int64)
    ptr = 0
    b = 0
    for ti in range(pr // tr):
        cnt[:] = 0
        for tj in range(ntj):
            for r in range(tr):
                row_buf = buf[r]
                c = cnt[r]
                for s in range(segs):
                    c, ptr = expand_mul_compress_f32(vals, ptr, np.int64(masks[b]), x, tj * tc + 16 * s, row_buf, c)
                    b += 1
                cnt[r] = c
        r = 0
        while r + 1 < tr:
            y[ti * tr + r], y[ti * tr + r + 1] = _sum_two_streams(buf[r], cnt[r], buf[r + 1], cnt[r + 1])
            r += 2
        if r < tr:
            y[ti * tr + r] = _sum_stream(buf[r], cnt[r])
    return y


# ---------------------------------------------------------------------------
# int8 SIMD paths (int32 lane accumulators, int64 final reduction)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _gemv_rowpair_i8(masks, vals, x, pr, pc):
    groups = pc // 8
    y = np.zeros(pr, np.int64)
    acc64 = np.zeros(64, np.int32)
    acc16 = np.zeros(16, np.int32)
    ptr = 0
    for p in range(pr // 2):
        acc64[:] = 0
        acc16[:] = 0
        base = p * groups
        g = 0
        while g + 4 <= groups:
            ptr = expand_dot_i8_pairs_x4(vals, ptr, masks, base + g, x, 8 * g, acc64)
            g += 4
        while g < groups:
            ptr = expand_dot_i8_pairs_x1(vals, ptr, masks, base + g, x, 8 * g, acc16)
            g += 1
        a = np.int64(0)
        b = np.int64(0)
        for k in range(0, 64, 2):
            a += acc64[k]
            b += acc64[k + 1]
        for k in range(0, 16, 2):
            a += acc16[k]
            b += acc16[k + 1]
        y[2 * p] = a
        y[2 * p + 1] = b
    return y


@njit(cache=True)
def _gemv_rowpair_i8_vnni(masks, vals, x, pr, pc):
    groups = pc // 8
    quads = groups // 4
    y = np.zeros(pr, np.int64)
    acc16 = np.zeros(16, np.int32)
    ptr = 0
    for p in range(pr // 2):
        base = p * groups
        ptr, a, b = rowpair_dot_i8_vnni(vals, ptr, masks, base, quads, x)
        acc16[:] = 0
        for g in range(4 * quads, groups):
            ptr = expand_dot_i8_pairs_x1(vals, ptr, masks, base + g, x, 8 * g, acc16)
        for k in range(0, 16, 2):
            a += acc16[k]
            b += acc16[k + 1]
        y[2 * p] = a
        y[2 * p + 1] = b
    return y


@njit(cache=True)
def _gemv_tile_i8(masks, vals, x, pr, pc, tr, tc):
    segs = tc // 16
    ntj = pc // tc
    y = np.zeros(pr, np.int64)
    acc = np.zeros((tr, 16), np.int32)
    ptr = 0
    b = 0
    for ti in range(pr // tr):
        acc[:, :] = 0
        for tj in range(ntj):
            for r in range(tr):
                lane_acc = acc[r]
                for s in range(segs):
                    ptr = expand_dot_i8_row_x1(vals, ptr, masks, b, x, tj * tc + 16 * s, lane_acc)
                    b += 1
        for r in range(tr):
            t = np.int64(0)
            for k in range(16):
                t += acc[r, k]
            y[ti * tr + r] = t
    return y


# ---------------------------------------------------------------------------
# generic scalar paths (any storage dtype; also the gemm kernels)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _lane_coords(b, lane, layout, groups, tr, tc, ntj):
    if layout == 0:
        p = b // groups
        g = b - p * groups
        return 2 * p + (lane & 1), 8 * g + (lane >> 1)
    segs = tc // 16
    per_tile = tr * segs
    tile = b // per_tile
    within = b - tile * per_tile
    r = within // segs
    s = within - r * segs
    ti = tile // ntj
    tj = tile - ti * ntj
    return ti * tr + r, tj * tc + 16 * s + lane


@njit(cache=True)
def _gemm_blocks(masks, vals, b_mat, pr, pc, layout, tr, tc, out):
    """out[row, :] += v * b_mat[col, :] for every stored value, in storage order."""
    groups = pc // 8
    ntj = pc // tc
    ptr = 0
    n = b_mat.shape[1]
    for blk in range(masks.shape[0]):
        m = np.int64(masks[blk])
        if m == 0:
            continue
        for lane in range(16):
            if (m >> (15 - lane)) & 1:
                row, col = _lane_coords(blk, lane, layout, groups, tr, tc, ntj)
                v = vals[ptr]
                ptr += 1
                for j in range(n):
                    out[row, j] += v * b_mat[col, j]
    return out


def _check_tile_geometry(sm: SparseMatrix):
    if sm.layout == Layout.TILE and sm.tile_cols % 16:
        raise ShapeError(f"tile width {sm.tile_cols} is not a multiple of 16")


def _padded_input(sm: SparseMatrix, x: np.ndarray, dtype) -> np.ndarray:
    _, pc = padded_shape(sm.rows, sm.cols, sm.layout, sm.tile_rows, sm.tile_cols)
    xp = np.zeros(pc, dtype=dtype)
    xp[: sm.cols] = x
    return xp


def _vector(x, n: int, what: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != n:
        raise ShapeError(f"{what}: matrix has {n} columns but input vector has shape {x.shape}")
    return x


def _matrix(b, n: int, what: str) -> np.ndarray:
    b = np.asarray(b)
    if b.ndim != 2 or b.shape[0] != n:
        raise ShapeError(f"{what}: matrix has {n} columns but right operand has shape {b.shape}")
    return b


# ---------------------------------------------------------------------------
# public kernels
# ---------------------------------------------------------------------------


def sparse_gemv(sm: SparseMatrix, x, counter=None) -> np.ndarray:
    """``decode_matrix(sm) @ x`` computed from the compressed blocks.

    Float storage runs the SIMD expand/multiply/compress kernel and returns
    float32. Integer storage with an integer ``x`` accumulates exactly in int64;
    with a float ``x`` it accumulates in float64 and rounds to float32.
    """
    x = _vector(x, sm.cols, "sparse_gemv")
    _check_tile_geometry(sm)
    if counter is not None:
        counter.add(sm, 1)
    pr, pc = padded_shape(sm.rows, sm.cols, sm.layout, sm.tile_rows, sm.tile_cols)
    if sm.dtype == StorageDtype.REAL32:
        xp = _padded_input(sm, x, FLOAT)
        if sm.layout == Layout.ROWPAIR16:
            y = _gemv_rowpair_f32(sm.masks, sm.values, xp, pr, pc)
        else:
            y = _gemv_tile_f32(sm.masks, sm.values, xp, pr, pc, sm.tile_rows, sm.tile_cols)
        return y[: sm.rows]
    if sm.dtype == StorageDtype.INT8 and x.dtype == np.int8:
        return sparse_gemv_i8_acc(sm, x)
    return sparse_gemm(sm, x[:, None])[:, 0]


def sparse_gemm(sm: SparseMatrix, b, counter=None) -> np.ndarray:
    """``decode_matrix(sm) @ b`` for a (cols, n) right operand.

    Each stored weight is applied as an axpy over the batch, so per output
    element the reduction runs in block then lane order. Float storage with a
    float32 operand accumulates in float32; integer storage with an integer
    operand accumulates exactly in int64; other combinations use float64.
    """
    b = _matrix(b, sm.cols, "sparse_gemm")
    _check_tile_geometry(sm)
    pr, pc = padded_shape(sm.rows, sm.cols, sm.layout, sm.tile_rows, sm.tile_cols)
    n = b.shape[1]
    is_int = sm.dtype != StorageDtype.REAL32 and b.dtype.kind in "iu"
    if sm.dtype == StorageDtype.REAL32 and b.dtype == FLOAT:
        acc_t = FLOAT
    elif is_int:
        narrow = sm.dtype == StorageDtype.INT8 and b.dtype.itemsize == 1 and sm.cols <= _GEMM_I32_MAX_COLS
        acc_t = np.int32 if narrow else np.int64
    else:
        acc_t = np.float64
    bp = np.zeros((pc, n), dtype=acc_t)
    bp[: sm.cols] = b
    out = np.zeros((pr, n), dtype=acc_t)
    _gemm_blocks(sm.masks, sm.values.astype(acc_t, copy=False), bp, pr, pc, int(sm.layout),
                 sm.tile_rows, sm.tile_cols, out)
    if counter is not None:
        counter.add(sm, n)
    out = out[: sm.rows]
    if acc_t == np.float64:
        out = out.astype(FLOAT)
    elif acc_t == np.int32:
        out = out.astype(np.int64)
    return np.ascontiguousarray(out)


def sparse_gemv_i8_acc(sm: SparseMatrix, x) -> np.ndarray:
    """Exact integer accumulators of an int8 sparse matrix times an int8 vector (int64 result)."""
    if sm.dtype != StorageDtype.INT8:
        raise ShapeError(f"sparse_gemv_i8 needs INT8 storage, got {sm.dtype.name}")
    x = _vector(x, sm.cols, "sparse_gemv_i8")
    if x.dtype != np.int8:
        raise ShapeError(f"sparse_gemv_i8 needs an int8 input vector, got {x.dtype}")
    _check_tile_geometry(sm)
    pr, pc = padded_shape(sm.rows, sm.cols, sm.layout, sm.tile_rows, sm.tile_cols)
    if sm.cols > SIMD_I8_MAX_COLS:
        return sparse_gemm(sm, x[:, None])[:, 0]
    xp = _padded_input(sm, x, np.int8)
    if sm.layout == Layout.ROWPAIR16 and HAS_VNNI and sm.cols <= VNNI_MAX_COLS:
        y = _gemv_rowpair_i8_vnni(sm.masks, sm.values, xp, pr, pc)
    elif sm.layout == Layout.ROWPAIR16:
        y = _gemv_rowpair_i8(sm.masks, sm.values, xp, pr, pc)
    else:
        y = _gemv_tile_i8(sm.masks, sm.values, xp, pr, pc, sm.tile_rows, sm.tile_cols)
    return y[: sm.rows]


def dequantize_acc(acc, scales, x_scale=1.0) -> np.ndarray:
    """Scale integer accumulators back to float32: ``acc * scales[row] * x_scale[col]``."""
    acc = np.asarray(acc)
    s = np.asarray(scales, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] != acc.shape[0]:
        raise ShapeError(f"expected {acc.shape[0]} row scales, got shape {s.shape}")
    xs = np.asarray(x_scale, dtype=np.float64)
    if acc.ndim == 1:
        out = acc * s * xs
    else:
        out = acc * s[:, None] * xs
    return out.astype(FLOAT)


def sparse_gemv_i8(sm: SparseMatrix, x, scales, x_scale: float = 1.0) -> np.ndarray:
    """int8 x int8 product, dequantized with per-row weight scales and the input scale."""
    return dequantize_acc(sparse_gemv_i8_acc(sm, x), scales, x_scale)


def sparse_gemm_i8_acc(sm: SparseMatrix, b) -> np.ndarray:
    if sm.dtype != StorageDtype.INT8:
        raise ShapeError(f"sparse_gemm_i8 needs INT8 storage, got {sm.dtype.name}")
    b = _matrix(b, sm.cols, "sparse_gemm_i8")
    if b.dtype != np.int8:
        raise ShapeError(f"sparse_gemm_i8 needs an int8 operand, got {b.dtype}")
    return sparse_gemm(sm, b)


@njit(cache=True)
def _dense_gemv_f32(w, x):
    rows, cols = w.shape
    y = np.empty(rows, np.float32)
    for i in range(rows):
        acc = np.float32(0.0)
        for j in range(cols):
            acc += w[i, j] * x[j]
        y[i] = acc
    return y


@njit(cache=True)
def _dense_gemm_f32(w, b):
    rows, cols = w.shape
    out = np.zeros((rows, b.shape[1]), np.float32)
    for i in range(rows):
        for j in range(cols):
            v = w[i, j]
            for k in range(b.shape[1]):
                out[i, k] += v * b[j, k]
    return out


@njit(cache=True)
def _dense_gemv_i8_narrow(w, x):
    # the int32 output lets LLVM keep the whole reduction in 32-bit lanes
    rows, cols = w.shape
    y = np.zeros(rows, np.int32)
    for i in range(rows):
        acc = np.int32(0)
        for j in range(cols):
            acc += np.int32(w[i, j]) * np.int32(x[j])
        y[i] = acc
    return y


@njit(cache=True)
def _dense_gemv_i8(w, x, chunk):
    rows, cols = w.shape
    y = np.zeros(rows, np.int64)
    for i in range(rows):
        total = np.int64(0)
        for j0 in range(0, cols, chunk):
            acc = np.int32(0)
            for j in range(j0, min(cols, j0 + chunk)):
                acc += np.int32(w[i, j]) * np.int32(x[j])
            total += np.int32(acc)
        y[i] = total
    return y


@njit(cache=True)
def _dense_gemm_i8(w, b, chunk):
    rows, cols = w.shape
    n = b.shape[1]
    out = np.zeros((rows, n), np.int64)
    acc = np.zeros(n, np.int32)
    for i in range(rows):
        for j0 in range(0, cols, chunk):
            acc[:] = 0
            for j in range(j0, min(cols, j0 + chunk)):
                v = np.int32(w[i, j])
                for k in range(n):
                    acc[k] += v * np.int32(b[j, k])
            for k in range(n):
                out[i, k] += acc[k]
    return out


def dense_gemv(w, x) -> np.ndarray:
    """Sequential float32 row dot products (the uncompressed baseline kernel)."""
    w = np.ascontiguousarray(w, dtype=FLOAT)
    x = _vector(x, w.shape[1], "dense_gemv")
    return _dense_gemv_f32(w, np.ascontiguousarray(x, dtype=FLOAT))


def dense_gemm(w, b) -> np.ndarray:
    w = np.ascontiguousarray(w, dtype=FLOAT)
    b = _matrix(b, w.shape[1], "dense_gemm")
    return _dense_gemm_f32(w, np.ascontiguousarray(b, dtype=FLOAT))


def dense_gemv_i8_acc(w, x) -> np.ndarray:
    w = np.ascontiguousarray(w, dtype=np.int8)
    x = _vector(x, w.shape[1], "dense_gemv_i8")
    x = np.ascontiguousarray(x, dtype=np.int8)
    if w.shape[1] <= _GEMM_I32_MAX_COLS:
        return _dense_gemv_i8_narrow(w, x).astype(np.int64)
    return _dense_gemv_i8(w, x, _DENSE_I8_CHUNK)


def dense_gemm_i8_acc(w, b) -> np.ndarray:
    w = np.ascontiguousarray(w, dtype=np.int8)
    b = _matrix(b, w.shape[1], "dense_gemm_i8")
    return _dense_gemm_i8(w, np.ascontiguousarray(b, dtype=np.int8), _DENSE_I8_CHUNK)



