"""Weighted multi-source data mixture and fixed-length token batches."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..errors import MixtureError
from ..tensors import Rng
from .corpus import GENERATORS, generate_text, task_text, to_tokens

# re-balanced source proportions (percent) used for sparse pretraining
PRETRAIN_PROPORTIONS = {
    "ArXiv": 4.2,
    "Books": 4.0,
    "C4": 25.8,
    "Commoncrawl": 51.7,
    "Github": 4.8,
    "StackExchange": 3.1,
    "Wikipedia": 3.3,
    "The Stack (Python)": 3.1,
}


@dataclass(frozen=True)
class Source:
    name: str
    weight: float
    tokens: np.ndarray  # 1-D int64 stream


@dataclass(frozen=True)
class DataMixture:
    sources: tuple

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if not self.sources:
            raise MixtureError("mixture has no sources")
        w = np.array([s.weight for s in self.sources], dtype=np.float64)
        if np.any(w < 0) or np.any(w > 1):
            raise MixtureError(f"weights must lie in [0, 1], got {w.tolist()}")
        if abs(w.sum() - 1.0) > 1e-9:
            raise MixtureError(f"weights must sum to 1 (got {w.sum():.12f})")

    @property
    def names(self) -> tuple:
        return tuple(s.name for s in self.sources)

    @property
    def weights(self) -> np.ndarray:
        return np.array([s.weight for s in self.sources], dtype=np.float64)


@dataclass(frozen=True)
class Batch:
    tokens: np.ndarray  # (n, seq_len + 1) int64: inputs are [:, :-1], targets [:, 1:]
    labels: np.ndarray  # (n,) index into the mixture's sources


def sample_sources(mix: DataMixture, rng: Rng, n: int) -> np.ndarray:
    """i.i.d. source indices drawn with the mixture weights."""
    w = mix.weights
    return rng.choice(len(w), size=n, p=w / w.sum())


def _windows(stream: np.ndarray, starts: np.ndarray, length: int) -> np.ndarray:
    return stream[starts[:, None] + np.arange(length)[None, :]]


def sample_mixture(mix: DataMixture, rng: Rng, n: int, seq_len: int = 64) -> Batch:
    """``n`` random windows of ``seq_len + 1`` tokens, each from a source chosen by weight."""
    labels = sample_sources(mix, rng, n)
    tokens = np.empty((n, seq_len + 1), dtype=np.int64)
    for i, src in enumerate(mix.sources):
        rows = np.flatnonzero(labels == i)
        if rows.size == 0:
            continue
        if src.tokens.size < seq_len + 1:
            raise MixtureError(f"source {src.name!r} has {src.tokens.size} tokens, need >= {seq_len + 1}")
        starts = rng.integers(0, src.tokens.size - seq_len, size=rows.size)
        tokens[rows] = _windows(src.tokens, starts, seq_len + 1)
    return Batch(tokens, labels)


def make_mixture(proportions: dict, bytes_per_source: int = 200_000, seed: int = 0) -> DataMixture:
    """Sources from the bundled generators; ``proportions`` may be percents or fractions."""
    unknown = sorted(set(proportions) - set(GENERATORS))
    if unknown:
        raise MixtureError(f"unknown sources: {', '.join(unknown)}")
    total = float(sum(proportions.values()))
    if total <= 0:
        raise MixtureError("proportions must have a positive sum")
    return DataMixture(tuple(
        Source(name, float(p) / total, to_tokens(generate_text(name, bytes_per_source, seed)))
        for name, p in proportions.items()
    ))


def pretrain_mixture(bytes_per_source: int = 200_000, seed: int = 0) -> DataMixture:
    return make_mixture(PRETRAIN_PROPORTIONS, bytes_per_source, seed)


@dataclass(frozen=True)
class TaskData:
    """Train/eval token streams of the downstream task."""

    train: np.ndarray
    eval: np.ndarray

    @classmethod
    def arithmetic(cls, n_train: int = 400, n_eval: int = 200, seed: int = 0) -> "TaskData":
        return cls(to_tokens(task_text(n_train, seed, "train")), to_tokens(task_text(n_eval, seed, "eval")))

    def as_mixture(self) -> DataMixture:
        return DataMixture((Source("task", 1.0, self.train),))


def eval_windows(stream: np.ndarray, seq_len: int, max_windows: int | None = None) -> np.ndarray:
    """Non-overlapping windows covering ``stream`` in order (deterministic evaluation batches)."""
    n = (stream.size - 1) // seq_len
    if max_windows is not None:
        n = min(n, max_windows)
    if n < 1:
        raise MixtureError(f"stream of {stream.size} tokens is shorter than one window of {seq_len + 1}")
    starts = np.arange(n) * seq_len
    return _windows(stream, starts, seq_len + 1)


def proportions_table(mix: DataMixture, labels: Sequence[int]) -> dict:
    counts = np.bincount(np.asarray(labels), minlength=len(mix.sources))
    return {name: counts[i] / max(1, len(labels)) for i, name in enumerate(mix.names)}
