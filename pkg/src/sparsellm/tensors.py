"""Dense numerical substrate: float32 matrices/vectors, a reproducible RNG, statistics.

Matrices and vectors are plain ``numpy`` arrays of dtype float32 (row-major).
The helpers here validate shapes and dtypes at module boundaries; everything
downstream assumes they have been applied.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, ShapeError

FLOAT = np.float32


def as_matrix(a, dtype=FLOAT) -> np.ndarray:
    """Return ``a`` as a C-contiguous 2-D array of ``dtype`` (rows, cols >= 1)."""
    m = np.ascontiguousarray(a, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"matrix dimensions must be >= 1, got {m.shape}")
    return m


def as_vector(v, dtype=FLOAT) -> np.ndarray:
    x = np.ascontiguousarray(v, dtype=dtype)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {x.shape}")
    return x


def matmul(a, b) -> np.ndarray:
    """Reference matrix product, accumulated in float64 and rounded to float32.

    This is the correctness oracle for every sparse kernel, so it deliberately
    uses a different (more accurate) accumulation path than the kernels do.
    Vectors are accepted for ``b`` and yield a vector.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ShapeError(f"matmul expects (matrix, matrix|vector), got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"dimension mismatch: {a.shape} x {b.shape} (a.cols={a.shape[1]}, b.rows={b.shape[0]})")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(FLOAT)


def kurtosis(data) -> float:
    """Population kurtosis E[(x-mu)^4] / sigma^4 (non-excess; a Gaussian gives 3).

    Raises DegenerateError for fewer than 4 values or zero variance.
    """
    x = np.asarray(data, dtype=np.float64).ravel()
    if x.size < 4:
        raise DegenerateError(f"kurtosis needs at least 4 values, got {x.size}")
    d = x - x.mean()
    var = np.mean(d * d)
    if var == 0.0:
        raise DegenerateError("zero variance: kurtosis undefined for a constant layer")
    return float(np.mean(d**4) / (var * var))


def sparsity_of(m, tol: float = 0.0) -> float:
    """Fraction of entries with ``|value| <= tol``."""
    if tol < 0:
        raise ValueError("tol must be >= 0")
    a = np.asarray(m)
    if a.size == 0:
        return 0.0
    return float(np.count_nonzero(np.abs(a) <= tol)) / a.size


def rel_error(actual, expected) -> float:
    """Max-norm relative deviation ``max|a - e| / max|e|`` (absolute if ``e`` is all zero)."""
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    scale = float(np.max(np.abs(e))) if e.size else 0.0
    diff = float(np.max(np.abs(a - e))) if e.size else 0.0
    return diff / scale if scale > 0 else diff


def array_digest(*arrays) -> str:
    """sha256 over shapes, dtypes and raw bytes; used for mask hashes and golden tests."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.dtype.str.encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class Rng:
    """Seeded counter-based generator (numpy Philox-4x64).

    Philox is a counter-based bijection, so a given seed yields the same stream
    on every platform and numpy version that ships it. ``substream`` derives
    independent child streams from ``(seed, tag)`` without consuming the parent.
    Each ``Rng`` owns a mutable numpy Generator: do not share one across
    threads, give each thread its own substream.
    """

    seed: int
    gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "gen", np.random.Generator(np.random.Philox(np.random.SeedSequence(int(self.seed)))))

    def substream(self, tag) -> "Rng":
        if isinstance(tag, str):
            tag = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")
        child = np.random.SeedSequence([int(self.seed), int(tag)]).generate_state(2, np.uint32)
        return Rng(int(child[0]) | (int(child[1]) << 32))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return (self.gen.standard_normal(shape) * scale).astype(FLOAT)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.gen.uniform(low, high, shape).astype(FLOAT)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, n: int, size, p=None):
        return self.gen.choice(n, size=size, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)
