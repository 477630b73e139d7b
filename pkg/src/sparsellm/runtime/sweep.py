"""Prefill/decode throughput sweep over sparsity levels and quantization."""

from __future__ import annotations

import statistics
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from ..codec import Layout
from ..compression import CalibrationSet, QuantRecipe, profile_uniform, prune_weights, quantize_weights
from ..compression.pruning import Method, Scope
from ..kernels.bench import write_csv
from ..model import ModelConfig, init_params, linear_names
from ..tensors import Rng
from .engine import Backend, ToyTransformer, capture_inputs, decode_step, prefill

SWEEP_CSV_COLUMNS = ("phase", "sparsity", "quant", "backend", "median_ns", "tokens_per_s",
                     "useful_flops", "dense_equiv_flops", "footprint_ratio")
# columns that depend only on the inputs, not on wall-clock time
DETERMINISTIC_COLUMNS = ("phase", "sparsity", "quant", "backend", "useful_flops", "dense_equiv_flops",
                         "footprint_ratio")
PHASES = ("prefill", "decode")


@dataclass(frozen=True)
class SweepSpec:
    levels: tuple = (0.0, 0.5, 0.7)
    quant: str = "both"  # off | on | both
    prefill: int = 512
    decode: int = 128
    repeats: int = 5
    layout: Layout = Layout.ROWPAIR16
    calib_samples: int = 4
    calib_seq_len: int = 32

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(s) for s in self.levels))
        object.__setattr__(self, "layout", Layout(self.layout))
        if not self.levels or any(not 0.0 <= s < 1.0 for s in self.levels):
            raise ValueError(f"sparsity levels must lie in [0, 1), got {self.levels}")
        if self.quant not in ("off", "on", "both"):
            raise ValueError(f"quant must be off, on or both, got {self.quant!r}")
        if self.prefill < 1 or self.decode < 1:
            raise ValueError("prefill and decode lengths must be >= 1")
        if self.repeats < 5:
            raise ValueError("repeats must be >= 5")

    @property
    def quant_modes(self) -> tuple:
        return {"off": (False,), "on": (True,), "both": (False, True)}[self.quant]


def backend_for(sparsity: float, quant: bool) -> Backend:
    if quant:
        return Backend.SPARSE_INT8 if sparsity > 0 else Backend.INT8
    return Backend.SPARSE if sparsity > 0 else Backend.DENSE


def build_model(cfg: ModelConfig, params: Mapping, sparsity: float, quant: bool, spec: SweepSpec,
                seed: int, recipe: QuantRecipe = QuantRecipe()) -> ToyTransformer:
    """Magnitude-prune every linear layer to ``sparsity`` and optionally quantize it."""
    names = linear_names(cfg)
    weights = dict(params)
    if sparsity > 0:
        weights, _, _ = prune_weights(weights, profile_uniform({n: weights[n] for n in names}, sparsity),
                                      Method.MAGNITUDE, scope=Scope.PER_LAYER)
    quantized = None
    if quant:
        rng = Rng(seed).substream("sweep-calibration")
        seqs = [rng.integers(0, cfg.vocab, size=spec.calib_seq_len) for _ in range(spec.calib_samples)]
        acts = capture_inputs(ToyTransformer(cfg, weights), seqs)
        calib = CalibrationSet(acts, spec.calib_samples, spec.calib_seq_len)
        quantized, _, _ = quantize_weights({n: weights[n] for n in names}, calib, recipe)
    return ToyTransformer(cfg, weights, backend_for(sparsity, quant), quantized, spec.layout)


def _backend_label(model: ToyTransformer) -> str:
    kinds = set(model.backends.values())
    return kinds.pop() if len(kinds) == 1 else "mixed"


def time_phases(model: ToyTransformer, prompt: Sequence[int], decode: int, repeats: int) -> dict:
    """Median prefill wall time and median per-token decode time (ns)."""
    prefill(model, prompt[:8])  # warm up compiled kernels
    pre, dec = [], []
    for _ in range(repeats):
        cache, logits, ns = prefill(model, prompt)
        pre.append(ns)
        tok, total = int(np.argmax(logits)), 0
        for _ in range(decode):
            logits, cache, ns = decode_step(model, cache, tok)
            tok = int(np.argmax(logits))
            total += ns
        dec.append(total / decode)
    return {"prefill": int(statistics.median(pre)), "decode": int(round(statistics.median(dec)))}


def run_sweep(cfg: ModelConfig, spec: SweepSpec, seed: int = 0, params: Mapping | None = None,
              recipe: QuantRecipe = QuantRecipe()) -> list:
    """One row per (level, quant, phase) with the columns of ``SWEEP_CSV_COLUMNS``."""
    if spec.prefill + spec.decode > cfg.max_ctx:
        raise ValueError(f"prefill + decode ({spec.prefill + spec.decode}) exceeds max context {cfg.max_ctx}")
    params = init_params(cfg, seed) if params is None else params
    prompt = Rng(seed).substream("sweep-prompt").integers(0, cfg.vocab, size=spec.prefill).tolist()
    rows = []
    for s in spec.levels:
        for quant in spec.quant_modes:
            model = build_model(cfg, params, s, quant, spec, seed, recipe)
            times = time_phases(model, prompt, spec.decode, spec.repeats)
            for phase in PHASES:
                tokens = spec.prefill if phase == "prefill" else 1
                flops = model.linear_flops(tokens)
                ns = times[phase]
                rows.append({
                    "phase": phase,
                    "sparsity": s,
                    "quant": "int8" if quant else "off",
                    "backend": _backend_label(model),
                    "median_ns": ns,
                    "tokens_per_s": tokens * 1e9 / ns if ns > 0 else float("inf"),
                    "useful_flops": flops.useful_flops,
                    "dense_equiv_flops": flops.dense_equiv_flops,
                    "footprint_ratio": model.footprint_ratio(),
                })
    return rows


def write_sweep_csv(path, rows: Sequence[Mapping]) -> None:
    write_csv(path, rows, SWEEP_CSV_COLUMNS)
