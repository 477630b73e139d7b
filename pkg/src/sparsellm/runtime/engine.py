"""Inference runtime: per-layer kernel backends, KV cache, prefill and greedy decode."""

from __future__ import annotations

import enum
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from ..codec import Layout, SparseMatrix, StorageDtype, encode_matrix, footprint
from ..compression.quant import QuantizedMatrix
from ..errors import ContextError, ShapeError
from ..kernels import (
    FlopCounter,
    dense_gemm,
    dense_gemm_i8_acc,
    dense_gemv,
    dense_gemv_i8_acc,
    dequantize_acc,
    sparse_gemm,
    sparse_gemm_i8_acc,
    sparse_gemv,
    sparse_gemv_i8_acc,
)
from ..model import ModelConfig, check_params, linear_names
from ..tensors import FLOAT
from .ops import causal_attention, relu, rmsnorm


class Backend(str, enum.Enum):
    DENSE = "dense"
    SPARSE = "sparse"
    INT8 = "int8"
    SPARSE_INT8 = "sparse_int8"

    @property
    def quantized(self) -> bool:
        return self in (Backend.INT8, Backend.SPARSE_INT8)

    @property
    def sparse(self) -> bool:
        return self in (Backend.SPARSE, Backend.SPARSE_INT8)


class _Linear:
    backend: Backend
    rows: int
    cols: int
    nnz: int

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """``x`` is (tokens, in); returns (tokens, out) float32."""
        if x.shape[0] == 1:
            return self.gemv(x[0])[None, :]
        return np.ascontiguousarray(self.gemm(np.ascontiguousarray(x.T)).T)

    def count(self, flops: FlopCounter, tokens: int) -> None:
        flops.useful_flops += 2 * self.nnz * tokens
        flops.dense_equiv_flops += 2 * self.rows * self.cols * tokens

    @property
    def dense_bytes(self) -> int:
        return self.rows * self.cols * 4


class DenseLinear(_Linear):
    backend = Backend.DENSE

    def __init__(self, w):
        self.w = np.ascontiguousarray(w, dtype=FLOAT)
        self.rows, self.cols = self.w.shape
        self.nnz = self.w.size  # dense kernels multiply every entry

    def gemv(self, x):
        return dense_gemv(self.w, x)

    def gemm(self, b):
        return dense_gemm(self.w, b)

    @property
    def stored_bytes(self) -> int:
        return self.w.nbytes


class SparseLinear(_Linear):
    backend = Backend.SPARSE

    def __init__(self, w, layout: Layout = Layout.ROWPAIR16):
        self.sm = w if isinstance(w, SparseMatrix) else encode_matrix(np.asarray(w, dtype=FLOAT), layout)
        if self.sm.dtype != StorageDtype.REAL32:
            raise ShapeError("sparse float backend needs REAL32 storage")
        self.rows, self.cols = self.sm.shape
        self.nnz = self.sm.nnz

    def gemv(self, x):
        return sparse_gemv(self.sm, x)

    def gemm(self, b):
        return sparse_gemm(self.sm, b)

    @property
    def stored_bytes(self) -> int:
        return footprint(self.sm).compressed_bytes


class Int8Linear(_Linear):
    backend = Backend.INT8

    def __init__(self, qm: QuantizedMatrix):
        self.qm = qm
        self.q = np.ascontiguousarray(qm.q)
        self.rows, self.cols = self.q.shape
        self.nnz = self.q.size

    def _acc_gemv(self, xq):
        return dense_gemv_i8_acc(self.q, xq)

    def _acc_gemm(self, bq):
        return dense_gemm_i8_acc(self.q, bq)

    def gemv(self, x):
        return dequantize_acc(self._acc_gemv(self.qm.quantize_input(x)), self.qm.scales, self.qm.act_scale)

    def gemm(self, b):
        bq = np.ascontiguousarray(self.qm.quantize_input(b.T).T)
        return dequantize_acc(self._acc_gemm(bq), self.qm.scales, self.qm.act_scale)

    @property
    def stored_bytes(self) -> int:
        extra = self.qm.scales.nbytes + (self.qm.smoothing.nbytes if self.qm.smoothing is not None else 0)
        return self.q.nbytes + extra

    @property
    def dense_bytes(self) -> int:
        return self.rows * self.cols * 4


class SparseInt8Linear(Int8Linear):
    backend = Backend.SPARSE_INT8

    def __init__(self, qm: QuantizedMatrix, layout: Layout = Layout.ROWPAIR16):
        super().__init__(qm)
        self.sm = encode_matrix(self.q, layout)
        self.nnz = self.sm.nnz

    def _acc_gemv(self, xq):
        return sparse_gemv_i8_acc(self.sm, xq)

    def _acc_gemm(self, bq):
        return sparse_gemm_i8_acc(self.sm, bq)

    @property
    def stored_bytes(self) -> int:
        extra = self.qm.scales.nbytes + (self.qm.smoothing.nbytes if self.qm.smoothing is not None else 0)
        return footprint(self.sm).compressed_bytes + extra


def make_linear(w, backend: Backend | str, qm: QuantizedMatrix | None = None,
                layout: Layout = Layout.ROWPAIR16) -> _Linear:
    """Build one layer's kernel wrapper. Quantized backends fall back to their
    float counterpart when ``qm`` is None (a layer skipped by quantization)."""
    backend = Backend(backend)
    if backend.quantized and qm is not None:
        return SparseInt8Linear(qm, layout) if backend.sparse else Int8Linear(qm)
    return SparseLinear(w, layout) if backend.sparse else DenseLinear(w)


@dataclass
class KVCache:
    k: np.ndarray  # (n_layers, max_ctx, d_model)
    v: np.ndarray
    length: int = 0

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "KVCache":
        shape = (cfg.n_layers, cfg.max_ctx, cfg.d_model)
        return cls(np.zeros(shape, FLOAT), np.zeros(shape, FLOAT), 0)


class ToyTransformer:
    """Numpy/numba inference model whose linear layers run on selectable kernels."""

    def __init__(self, cfg: ModelConfig, params: Mapping, backend: Backend | str = Backend.DENSE,
                 quantized: Mapping | None = None, layout: Layout = Layout.ROWPAIR16,
                 backends: Mapping | None = None):
        check_params(cfg, params)
        self.cfg = cfg
        self.params = {k: np.ascontiguousarray(v, dtype=FLOAT) for k, v in params.items()}
        quantized = dict(quantized or {})
        per_layer = dict(backends or {})
        self.linears = {}
        for name in linear_names(cfg):
            b = Backend(per_layer.get(name, backend))
            self.linears[name] = make_linear(self.params[name], b, quantized.get(name), layout)
        self.head = DenseLinear(self.params["head"])

    @property
    def backends(self) -> dict:
        return {k: lin.backend.value for k, lin in self.linears.items()}

    def linear_flops(self, tokens: int) -> FlopCounter:
        flops = FlopCounter()
        for lin in self.linears.values():
            lin.count(flops, tokens)
        return flops

    def footprint_ratio(self) -> float:
        stored = sum(lin.stored_bytes for lin in self.linears.values())
        dense = sum(lin.dense_bytes for lin in self.linears.values())
        return stored / dense

    def forward(self, tokens: Sequence[int], cache: KVCache, hook=None) -> np.ndarray:
        """Run ``tokens`` at positions ``cache.length..``, append their keys/values, return logits.

        ``hook(name, x)`` if given sees every linear layer's input.
        """
        cfg, p = self.cfg, self.params
        ids = np.asarray(tokens, dtype=np.int64)
        t_new = ids.shape[0]
        start = cache.length
        if t_new < 1:
            raise ShapeError("need at least one token")
        if start + t_new > cfg.max_ctx:
            raise ContextError(f"sequence of {start + t_new} tokens exceeds max context {cfg.max_ctx}")
        if ids.min() < 0 or ids.max() >= cfg.vocab:
            raise ShapeError(f"token ids must lie in [0, {cfg.vocab})")

        def lin(name, x):
            if hook is not None:
                hook(name, x)
            return self.linears[name](x)

        x = p["embed.tok"][ids] + p["embed.pos"][start : start + t_new]
        for i in range(cfg.n_layers):
            pre = f"layers.{i}"
            h = rmsnorm(x, p[f"{pre}.norm1"], cfg.norm_eps)
            q = lin(f"{pre}.attn.q", h)
            cache.k[i, start : start + t_new] = lin(f"{pre}.attn.k", h)
            cache.v[i, start : start + t_new] = lin(f"{pre}.attn.v", h)
            a = causal_attention(q, cache.k[i], cache.v[i], start, cfg.n_heads)
            x = x + lin(f"{pre}.attn.o", a)
            h = rmsnorm(x, p[f"{pre}.norm2"], cfg.norm_eps)
            x = x + lin(f"{pre}.mlp.down", relu(lin(f"{pre}.mlp.up", h)))
        cache.length = start + t_new
        return self.head(rmsnorm(x, p["norm_f"], cfg.norm_eps))


def forward_full(model: ToyTransformer, tokens: Sequence[int]) -> np.ndarray:
    """Logits for every position of ``tokens`` from an empty cache (the no-cache oracle)."""
    return model.forward(tokens, KVCache.empty(model.cfg))


def prefill(model: ToyTransformer, prompt: Sequence[int]):
    """Returns ``(cache, last_logits, elapsed_ns)``."""
    if len(prompt) < 1:
        raise ShapeError("prompt must contain at least one token")
    cache = KVCache.empty(model.cfg)
    t0 = time.perf_counter_ns()
    logits = model.forward(prompt, cache)
    return cache, logits[-1], time.perf_counter_ns() - t0


def decode_step(model: ToyTransformer, cache: KVCache, last_token: int):
    """Returns ``(next_logits, cache, elapsed_ns)``; the cache is updated in place."""
    if cache.length >= model.cfg.max_ctx:
        raise ContextError(f"KV cache is full ({cache.length} = max context)")
    t0 = time.perf_counter_ns()
    logits = model.forward([int(last_token)], cache)
    return logits[0], cache, time.perf_counter_ns() - t0


@dataclass(frozen=True)
class GenRequest:
    prompt: tuple
    max_new_tokens: int
    greedy: bool = True

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        if not self.greedy:
            raise ValueError("only greedy decoding is supported")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")


@dataclass(frozen=True)
class GenResult:
    tokens: tuple
    ttft_ns: int
    decode_ns: tuple = field(default=())


def _argmax(logits) -> int:
    return int(np.argmax(logits))


def generate(model: ToyTransformer, req: GenRequest) -> GenResult:
    """Greedy generation with the KV cache."""
    if len(req.prompt) + req.max_new_tokens > model.cfg.max_ctx:
        raise ContextError(f"prompt + new tokens exceed max context {model.cfg.max_ctx}")
    out, times = [], []
    if req.max_new_tokens == 0:
        return GenResult((), 0, ())
    cache, logits, ttft = prefill(model, req.prompt)
    tok = _argmax(logits)
    out.append(tok)
    for _ in range(req.max_new_tokens - 1):
        logits, cache, ns = decode_step(model, cache, tok)
        tok = _argmax(logits)
        out.append(tok)
        times.append(ns)
    return GenResult(tuple(out), ttft, tuple(times))


def generate_recompute(model: ToyTransformer, req: GenRequest) -> tuple:
    """Greedy generation re-running the whole prefix each step (no cache reuse)."""
    seq = list(req.prompt)
    out = []
    for _ in range(req.max_new_tokens):
        tok = _argmax(forward_full(model, seq)[-1])
        out.append(tok)
        seq.append(tok)
    return tuple(out)


def capture_inputs(model: ToyTransformer, sequences: Sequence[Sequence[int]]) -> dict:
    """Collect each linear layer's inputs over ``sequences`` (stacked row-wise)."""
    seen: dict = {name: [] for name in model.linears}

    def hook(name, x):
        seen[name].append(np.array(x, dtype=FLOAT))

    for seq in sequences:
        model.forward(seq, KVCache.empty(model.cfg), hook=hook)
    return {k: np.concatenate(v, axis=0) for k, v in seen.items()}
