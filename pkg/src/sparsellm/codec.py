"""Bitmask-expansion compressed sparse weight format.

A matrix is cut into 16-lane blocks. Each block stores a 16-bit mask with one
bit per lane plus the nonzero lane values, densely, in lane order. Lane 0 is
the most significant mask bit, so a block whose lanes read
``[0, B1, A2, B2, 0, 0, A4, 0, A5, 0, 0, B6, 0, B7, A8, B8]`` has mask
``0b0111001010010111``.

Two block layouts are supported:

``ROWPAIR16``
    Two rows by eight columns, interleaved column-major: lane ``2k`` holds
    row A column ``k`` and lane ``2k+1`` holds row B column ``k``. Blocks are
    ordered by row pair, then by column group.
``TILE``
    ``tile_rows x tile_cols`` submatrices (default 16x16) visited row-major;
    inside a tile every row is split into 16-column segments, one block each.

Ragged edges are zero padded; padding lanes always encode as zero bits.
A lane counts as nonzero when its bit pattern is nonzero, so ``-0.0`` and NaN
payloads survive a round trip unchanged.

On-disk container (little-endian)::

    magic "SPKT" | u16 version | u8 layout | u8 dtype | u32 rows | u32 cols
    | u16 tile_rows | u16 tile_cols | u64 n_blocks | u64 nnz
    then per block: u16 mask, popcount(mask) values
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numba as nb
import numpy as np

from .errors import CorruptionError, ShapeError

MAGIC = b"SPKT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBBIIHHQQ")
HEADER_SIZE = _HEADER.size
LANES = 16
MASK_BYTES = 2


class Layout(enum.IntEnum):
    ROWPAIR16 = 0
    TILE = 1


class StorageDtype(enum.IntEnum):
    REAL32 = 0
    INT8 = 1
    INT16 = 2

    @property
    def numpy(self) -> np.dtype:
        return np.dtype({0: "<f4", 1: "i1", 2: "<i2"}[int(self)])

    @property
    def itemsize(self) -> int:
        return self.numpy.itemsize

    @classmethod
    def from_numpy(cls, dt) -> "StorageDtype":
        dt = np.dtype(dt)
        found = {("f", 4): cls.REAL32, ("i", 1): cls.INT8, ("i", 2): cls.INT16}.get((dt.kind, dt.itemsize))
        if found is not None:
            return found
        raise ShapeError(f"unsupported storage dtype {dt}; use float32, int8 or int16")


@dataclass(frozen=True)
class BitmaskBlock:
    bitmask: int
    values: tuple

    def __post_init__(self):
        if not 0 <= self.bitmask < 1 << LANES:
            raise ValueError(f"bitmask {self.bitmask:#x} does not fit 16 bits")


def popcount16(mask: int) -> int:
    return bin(mask & 0xFFFF).count("1")


def interleave_rowpair(row_a, row_b) -> list:
    """Pair two 8-value rows into the 16-lane register order (A0, B0, A1, B1, ...)."""
    if len(row_a) != 8 or len(row_b) != 8:
        raise ShapeError("interleave_rowpair needs exactly 8 entries per row (pad edges with zeros)")
    lanes = []
    for a, b in zip(row_a, row_b):
        lanes.extend((a, b))
    return lanes


def _is_nonzero(x) -> bool:
    if isinstance(x, (float, np.floating)):
        return np.float32(x).view(np.uint32) != 0
    return x != 0


def encode_block(lanes) -> BitmaskBlock:
    if len(lanes) != LANES:
        raise ShapeError(f"a block has exactly {LANES} lanes, got {len(lanes)}")
    mask = 0
    values = []
    for i, v in enumerate(lanes):
        if _is_nonzero(v):
            mask |= 1 << (LANES - 1 - i)
            values.append(v)
    return BitmaskBlock(mask, tuple(values))


def decode_block(block: BitmaskBlock, zero=0) -> list:
    if popcount16(block.bitmask) != len(block.values):
        raise CorruptionError(
            f"popcount({block.bitmask:#06x})={popcount16(block.bitmask)} but block carries {len(block.values)} values"
        )
    it = iter(block.values)
    return [next(it) if block.bitmask >> (LANES - 1 - i) & 1 else zero for i in range(LANES)]


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Immutable block-compressed matrix. Build it with :func:`encode_matrix`."""

    rows: int
    cols: int
    layout: Layout
    dtype: StorageDtype
    masks: np.ndarray  # uint16, one per block, in block order
    values: np.ndarray  # nonzero values, block order then lane order
    tile_rows: int = 16
    tile_cols: int = 16

    def __post_init__(self):
        for a in (self.masks, self.values):
            a.flags.writeable = False
        if self.masks.shape[0] != n_blocks(self.rows, self.cols, self.layout, self.tile_rows, self.tile_cols):
            raise CorruptionError("block count does not match matrix geometry")
        if int(self.offsets[-1]) != self.values.shape[0]:
            raise CorruptionError(
                f"total popcount {int(self.offsets[-1])} != stored value count {self.values.shape[0]}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def n_blocks(self) -> int:
        return int(self.masks.shape[0])

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / (self.rows * self.cols)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Start of each block's values; ``offsets[-1] == nnz``."""
        out = np.zeros(self.masks.shape[0] + 1, dtype=np.int64)
        np.cumsum(_POPCOUNT[self.masks], out=out[1:])
        out.flags.writeable = False
        return out

    def block(self, i: int) -> BitmaskBlock:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return BitmaskBlock(int(self.masks[i]), tuple(self.values[lo:hi].tolist()))

    def iter_blocks(self):
        for i in range(self.n_blocks):
            yield self.block(i)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)

    def __hash__(self):
        return hash(to_bytes(self))


_POPCOUNT = np.array([bin(i).count("1") for i in range(1 << LANES)], dtype=np.int64)


def _check_tile(tile_rows: int, tile_cols: int):
    if tile_rows < 1 or tile_cols < LANES or tile_cols % LANES:
        raise ShapeError(f"tile must be >=1 rows and a multiple of {LANES} columns, got {tile_rows}x{tile_cols}")


def padded_shape(rows, cols, layout, tile_rows=16, tile_cols=16) -> tuple[int, int]:
    if layout == Layout.ROWPAIR16:
        return -(-rows // 2) * 2, -(-cols // 8) * 8
    _check_tile(tile_rows, tile_cols)
    return -(-rows // tile_rows) * tile_rows, -(-cols // tile_cols) * tile_cols


def n_blocks(rows, cols, layout, tile_rows=16, tile_cols=16) -> int:
    pr, pc = padded_shape(rows, cols, layout, tile_rows, tile_cols)
    return pr * pc // LANES


def _to_lanes(padded: np.ndarray, layout, tile_rows, tile_cols) -> np.ndarray:
    pr, pc = padded.shape
    if layout == Layout.ROWPAIR16:
        # (pair, row-in-pair, group, col-in-group) -> (pair, group, col, row): lane = 2*col + row
        return padded.reshape(pr // 2, 2, pc // 8, 8).transpose(0, 2, 3, 1).reshape(-1, LANES)
    t = padded.reshape(pr // tile_rows, tile_rows, pc // tile_cols, tile_cols // LANES, LANES)
    return t.transpose(0, 2, 1, 3, 4).reshape(-1, LANES)


def _from_lanes(lanes: np.ndarray, pr, pc, layout, tile_rows, tile_cols) -> np.ndarray:
    if layout == Layout.ROWPAIR16:
        return lanes.reshape(pr // 2, pc // 8, 8, 2).transpose(0, 3, 1, 2).reshape(pr, pc)
    t = lanes.reshape(pr // tile_rows, pc // tile_cols, tile_rows, tile_cols // LANES, LANES)
    return t.transpose(0, 2, 1, 3, 4).reshape(pr, pc)


def _nonzero_lanes(lanes: np.ndarray) -> np.ndarray:
    if lanes.dtype.kind == "f":
        return lanes.view(np.uint32 if lanes.dtype.itemsize == 4 else np.uint64) != 0
    return lanes != 0


def encode_matrix(m, layout: Layout = Layout.ROWPAIR16, dtype: StorageDtype | None = None,
                  tile_rows: int = 16, tile_cols: int = 16) -> SparseMatrix:
    """Compress a 2-D array. ``dtype`` defaults to the array's own dtype.

    Requesting a different storage dtype is only allowed when the cast is exact.
    """
    layout = Layout(layout)
    a = np.asarray(m)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"encode_matrix expects a non-empty 2-D array, got shape {a.shape}")
    sd = StorageDtype.from_numpy(a.dtype) if dtype is None else StorageDtype(dtype)
    target = sd.numpy
    if a.dtype != target:
        cast = a.astype(target)
        if not np.array_equal(cast.astype(a.dtype), a):
            raise ShapeError(f"values do not fit storage dtype {sd.name} exactly")
        a = cast
    if layout == Layout.TILE:
        _check_tile(tile_rows, tile_cols)
    rows, cols = a.shape
    pr, pc = padded_shape(rows, cols, layout, tile_rows, tile_cols)
    padded = np.zeros((pr, pc), dtype=target)
    padded[:rows, :cols] = a
    lanes = _to_lanes(padded, layout, tile_rows, tile_cols)
    nz = _nonzero_lanes(lanes)
    packed = np.packbits(nz, axis=1, bitorder="big")
    masks = (packed[:, 0].astype(np.uint16) << 8) | packed[:, 1].astype(np.uint16)
    values = np.ascontiguousarray(lanes[nz])
    return SparseMatrix(rows, cols, layout, sd, masks, values, tile_rows, tile_cols)


def decode_matrix(sm: SparseMatrix) -> np.ndarray:
    pr, pc = padded_shape(sm.rows, sm.cols, sm.layout, sm.tile_rows, sm.tile_cols)
    bits = np.unpackbits(sm.masks.astype(">u2").view(np.uint8).reshape(-1, 2), axis=1, bitorder="big").astype(bool)
    if int(bits.sum()) != sm.nnz:
        raise CorruptionError(f"total popcount {int(bits.sum())} != {sm.nnz} stored values")
    lanes = np.zeros(bits.shape, dtype=sm.dtype.numpy)
    lanes[bits] = sm.values
    full = _from_lanes(lanes, pr, pc, sm.layout, sm.tile_rows, sm.tile_cols)
    return np.ascontiguousarray(full[: sm.rows, : sm.cols])


@dataclass(frozen=True)
class FootprintReport:
    dense_bytes: int
    compressed_bytes: int

    @property
    def ratio(self) -> float:
        return self.compressed_bytes / self.dense_bytes


def footprint(sm: SparseMatrix) -> FootprintReport:
    """Bytes of the dense matrix vs. stored values plus one 16-bit mask per block."""
    return FootprintReport(
        dense_bytes=sm.rows * sm.cols * sm.dtype.itemsize,
        compressed_bytes=sm.values.nbytes + sm.n_blocks * MASK_BYTES,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def to_bytes(sm: SparseMatrix) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, int(sm.layout), int(sm.dtype), sm.rows, sm.cols,
                          sm.tile_rows, sm.tile_cols, sm.n_blocks, sm.nnz)
    item = sm.dtype.itemsize
    pop = np.diff(sm.offsets)
    sizes = MASK_BYTES + pop * item
    starts = np.zeros(sm.n_blocks, dtype=np.int64)
    np.cumsum(sizes[:-1], out=starts[1:])
    buf = np.zeros(int(sizes.sum()), dtype=np.uint8)
    buf[starts] = (sm.masks & 0xFF).astype(np.uint8)
    buf[starts + 1] = (sm.masks >> 8).astype(np.uint8)
    if sm.nnz:
        owner = np.repeat(np.arange(sm.n_blocks), pop)
        rank = np.arange(sm.nnz) - sm.offsets[owner]
        dest = starts[owner] + MASK_BYTES + rank * item
        vbytes = sm.values.astype(sm.dtype.numpy).view(np.uint8).reshape(sm.nnz, item)
        buf[dest[:, None] + np.arange(item)] = vbytes
    return header + buf.tobytes()


@nb.njit(cache=True)
def _scan_blocks(buf, pos, count, item, masks, value_pos):
    for b in range(count):
        if pos + 2 > buf.shape[0]:
            return -1
        m = np.int64(buf[pos]) | (np.int64(buf[pos + 1]) << 8)
        masks[b] = m
        pos += 2
        pop = 0
        while m:
            m &= m - 1
            pop += 1
        value_pos[b] = pos
        pos += pop * item
        if pos > buf.shape[0]:
            return -1
    return pos


def from_bytes(data: bytes) -> SparseMatrix:
    if len(data) < HEADER_SIZE:
        raise CorruptionError(f"truncated stream: {len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
    magic, version, layout, dtype, rows, cols, tr, tc, count, nnz = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptionError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CorruptionError(f"unsupported format version {version}")
    try:
        layout, sd = Layout(layout), StorageDtype(dtype)
    except ValueError as exc:
        raise CorruptionError(str(exc)) from None
    if rows < 1 or cols < 1:
        raise CorruptionError(f"invalid dimensions {rows}x{cols}")
    if layout == Layout.TILE and (tr < 1 or tc < LANES or tc % LANES):
        raise CorruptionError(f"invalid tile shape {tr}x{tc}")
    expected = n_blocks(rows, cols, layout, tr, tc)
    if count != expected:
        raise CorruptionError(f"header claims {count} blocks, geometry implies {expected}")
    buf = np.frombuffer(data, dtype=np.uint8)
    masks = np.empty(count, dtype=np.uint16)
    vpos = np.empty(count, dtype=np.int64)
    end = _scan_blocks(buf, HEADER_SIZE, count, sd.itemsize, masks, vpos)
    if end < 0:
        raise CorruptionError("truncated stream: block data ends early")
    if end != len(data):
        raise CorruptionError(f"{len(data) - end} trailing bytes after the last block")
    pop = _POPCOUNT[masks]
    if int(pop.sum()) != nnz:
        raise CorruptionError(f"header nnz {nnz} != total popcount {int(pop.sum())}")
    item = sd.itemsize
    if nnz:
        owner = np.repeat(np.arange(count), pop)
        first = np.zeros(count, dtype=np.int64)
        np.cumsum(pop[:-1], out=first[1:])
        rank = np.arange(nnz) - first[owner]
        src = vpos[owner] + rank * item
        raw = buf[src[:, None] + np.arange(item)]
        values = np.ascontiguousarray(raw).view(sd.numpy).reshape(nnz).astype(sd.numpy.newbyteorder("="))
    else:
        values = np.zeros(0, dtype=sd.numpy.newbyteorder("="))
    return SparseMatrix(rows, cols, layout, sd, masks, values, tr, tc)


def read_header(data: bytes) -> dict:
    if len(data) < HEADER_SIZE:
        raise CorruptionError("truncated stream: missing header")
    magic, version, layout, dtype, rows, cols, tr, tc, count, nnz = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptionError(f"bad magic {magic!r}")
    return {"version": version, "layout": Layout(layout).name, "dtype": StorageDtype(dtype).name,
            "rows": rows, "cols": cols, "tile_rows": tr, "tile_cols": tc, "n_blocks": count, "nnz": nnz}


def save(sm: SparseMatrix, path) -> None:
    Path(path).write_bytes(to_bytes(sm))


def load(path) -> SparseMatrix:
    return from_bytes(Path(path).read_bytes())
