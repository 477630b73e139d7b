"""FLOP accounting, timing harness and CSV output for the matrix kernels."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ..codec import SparseMatrix, StorageDtype, footprint
from ..errors import ShapeError
from ..tensors import Rng

KERNEL_CSV_COLUMNS = (
    "shape", "layout", "dtype", "sparsity", "useful_flops", "dense_equiv_flops", "median_ns", "bytes_touched",
)


@dataclass
class FlopCounter:
    """Multiply-add accounting: 2 flops per stored nonzero per batch column."""

    useful_flops: int = 0
    dense_equiv_flops: int = 0

    def add(self, sm: SparseMatrix, batch: int = 1) -> None:
        self.useful_flops += 2 * sm.nnz * batch
        self.dense_equiv_flops += 2 * sm.rows * sm.cols * batch

    def add_dense(self, rows: int, cols: int, batch: int = 1) -> None:
        self.useful_flops += 2 * rows * cols * batch
        self.dense_equiv_flops += 2 * rows * cols * batch

    def merge(self, other: "FlopCounter") -> None:
        self.useful_flops += other.useful_flops
        self.dense_equiv_flops += other.dense_equiv_flops

    @property
    def exact_ratio(self) -> Fraction:
        if self.dense_equiv_flops == 0:
            return Fraction(0)
        return Fraction(self.useful_flops, self.dense_equiv_flops)

    @property
    def ratio(self) -> float:
        return float(self.exact_ratio)


@dataclass(frozen=True)
class KernelTiming:
    wall_ns_median: int
    repeats: int
    bytes_touched: int

    def __post_init__(self):
        if self.repeats < 5:
            raise ValueError(f"timings need at least 5 repeats, got {self.repeats}")


@dataclass(frozen=True)
class Workload:
    """``gemv`` (one token) or ``gemm`` over a batch of ``batch`` columns."""

    kind: str = "gemv"
    batch: int = 1

    def __post_init__(self):
        if self.kind not in ("gemv", "gemm"):
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.batch < 1 or (self.kind == "gemv" and self.batch != 1):
            raise ValueError(f"invalid batch {self.batch} for {self.kind}")

    @classmethod
    def gemv(cls) -> "Workload":
        return cls("gemv", 1)

    @classmethod
    def gemm_batch(cls, n: int) -> "Workload":
        return cls("gemm", int(n))

    @classmethod
    def parse(cls, text: str) -> "Workload":
        """``"gemv"`` or ``"gemm:<n>"``."""
        if text == "gemv":
            return cls.gemv()
        kind, _, n = text.partition(":")
        if kind != "gemm" or not n.isdigit():
            raise ValueError(f"workload must be 'gemv' or 'gemm:<n>', got {text!r}")
        return cls.gemm_batch(int(n))

    def __str__(self) -> str:
        return "gemv" if self.kind == "gemv" else f"gemm:{self.batch}"


def time_call(fn, repeats: int = 5, warmup: int = 1) -> int:
    """Median wall time of ``fn()`` in nanoseconds."""
    if repeats < 5:
        raise ValueError(f"repeats must be >= 5, got {repeats}")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return int(statistics.median(samples))


def _operand(dtype: StorageDtype, cols: int, workload: Workload, rng: Rng):
    shape = (cols,) if workload.kind == "gemv" else (cols, workload.batch)
    if dtype == StorageDtype.REAL32:
        return rng.normal(shape)
    return rng.integers(-127, 128, size=shape).astype(np.int8)


def _io_bytes(rows, cols, itemsize, workload: Workload) -> int:
    out_item = 4 if itemsize == 4 else 8
    return (cols * itemsize + rows * out_item) * workload.batch


def bench_kernel(sm: SparseMatrix, workload: Workload = Workload.gemv(), repeats: int = 5,
                 seed: int = 0) -> tuple[KernelTiming, FlopCounter]:
    """Time the sparse kernel for ``sm`` on a random operand of the matching dtype."""
    from .core import sparse_gemm, sparse_gemv, sparse_gemv_i8_acc

    if repeats < 5:
        raise ValueError(f"repeats must be >= 5, got {repeats}")
    operand = _operand(sm.dtype, sm.cols, workload, Rng(seed).substream("bench-operand"))
    if workload.kind == "gemv":
        kernel = sparse_gemv_i8_acc if sm.dtype == StorageDtype.INT8 else sparse_gemv
    else:
        kernel = sparse_gemm
    median = time_call(lambda: kernel(sm, operand), repeats)
    flops = FlopCounter()
    flops.add(sm, workload.batch)
    touched = footprint(sm).compressed_bytes + _io_bytes(sm.rows, sm.cols, sm.dtype.itemsize, workload)
    return KernelTiming(median, repeats, touched), flops


def bench_dense(w: np.ndarray, workload: Workload = Workload.gemv(), repeats: int = 5,
                seed: int = 0) -> tuple[KernelTiming, FlopCounter]:
    """Time the dense baseline kernel (float32 or int8 weights)."""
    from .core import dense_gemm, dense_gemm_i8_acc, dense_gemv, dense_gemv_i8_acc

    w = np.ascontiguousarray(w)
    if w.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {w.shape}")
    sd = StorageDtype.from_numpy(w.dtype)
    operand = _operand(sd, w.shape[1], workload, Rng(seed).substream("bench-operand"))
    if sd == StorageDtype.INT8:
        kernel = dense_gemv_i8_acc if workload.kind == "gemv" else dense_gemm_i8_acc
    else:
        kernel = dense_gemv if workload.kind == "gemv" else dense_gemm
    median = time_call(lambda: kernel(w, operand), repeats)
    flops = FlopCounter()
    flops.add_dense(*w.shape, workload.batch)
    touched = w.nbytes + _io_bytes(*w.shape, w.dtype.itemsize, workload)
    return KernelTiming(median, repeats, touched), flops


def kernel_csv_row(shape, layout: str, dtype: str, sparsity: float, timing: KernelTiming,
                   flops: FlopCounter) -> dict:
    return {
        "shape": f"{shape[0]}x{shape[1]}",
        "layout": layout,
        "dtype": dtype,
        "sparsity": f"{sparsity:.6f}",
        "useful_flops": flops.useful_flops,
        "dense_equiv_flops": flops.dense_equiv_flops,
        "median_ns": timing.wall_ns_median,
        "bytes_touched": timing.bytes_touched,
    }


def write_csv(path, rows, columns=KERNEL_CSV_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
