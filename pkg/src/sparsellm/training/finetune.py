"""Sparse pretraining and the four fine-tuning pipelines."""

from __future__ import annotations

import enum
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from ..compression import (
    CalibrationSet,
    Method,
    Scope,
    iterative_prune_schedule,
    profile_owl,
    profile_uniform,
    prune_weights,
)
from ..errors import ModeError
from ..masks import SparsityMask
from ..model import ModelConfig, linear_names
from ..runtime import ToyTransformer, capture_inputs
from ..tensors import Rng
from .data import DataMixture, TaskData
from .loop import DistillConfig, TrainConfig, default_loss, distill_loss_fn, evaluate, train
from .torch_model import TorchTransformer


class FinetuneMode(str, enum.Enum):
    DENSE_THEN_ONESHOT = "dense-then-oneshot"
    PRUNE_DURING_FINETUNE = "prune-during-finetune"
    ONESHOT_THEN_SPARSE_FT = "oneshot-then-sparse-ft"
    SPARSE_PRETRAINED_THEN_SPARSE_FT = "sparse-pretrained-then-sparse-ft"


# stage sequence per mode
STAGES = {
    FinetuneMode.DENSE_THEN_ONESHOT: ("dense-ft", "one-shot"),
    FinetuneMode.PRUNE_DURING_FINETUNE: ("gradual-ft",),
    FinetuneMode.ONESHOT_THEN_SPARSE_FT: ("dense-ft", "one-shot", "sparse-ft"),
    FinetuneMode.SPARSE_PRETRAINED_THEN_SPARSE_FT: ("sparse-ft",),
}


@dataclass(frozen=True)
class ModelState:
    """Parameters plus the frozen mask they satisfy (``None`` for a dense model)."""

    params: Mapping
    mask: SparsityMask | None = None

    @property
    def sparse(self) -> bool:
        return self.mask is not None


@dataclass(frozen=True)
class FinetuneConfig:
    train: TrainConfig = TrainConfig(steps=600, lr=0.05, eval_every=100)
    method: Method = Method.OBS
    scope: Scope = Scope.PER_ROW
    profile: str = "uniform"  # or "owl"
    distill: DistillConfig | None = None
    prune_stages: int = 8  # gradual schedule: number of pruning events
    prune_end: float = 2 / 3  # fraction of steps over which gradual pruning ramps up
    calib_samples: int = 16
    calib_seq_len: int = 64
    damp: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "scope", Scope(self.scope))
        if self.profile not in ("uniform", "owl"):
            raise ValueError(f"profile must be 'uniform' or 'owl', got {self.profile!r}")
        if self.prune_stages < 1 or not 0.0 < self.prune_end <= 1.0:
            raise ValueError("gradual pruning needs prune_stages >= 1 and prune_end in (0, 1]")


@dataclass
class FinetuneResult:
    mode: FinetuneMode
    state: ModelState
    stages: list = field(default_factory=list)  # one dict per stage: name, eval_loss, accuracy, sparsity, steps
    dense_metric: float | None = None
    dense_eval_loss: float | None = None

    @property
    def eval_loss(self) -> float:
        return self.stages[-1]["eval_loss"]

    @property
    def accuracy(self) -> float:
        return self.stages[-1]["accuracy"]

    @property
    def recovery(self) -> float | None:
        if not self.dense_metric:
            return None
        return self.accuracy / self.dense_metric

    @property
    def regularized(self) -> bool | None:
        """Sparse model generalises better than its dense reference (reported, never asserted)."""
        if self.dense_eval_loss is None:
            return None
        return self.eval_loss < self.dense_eval_loss

    def metrics(self) -> dict:
        return {
            "mode": self.mode.value,
            "stages": self.stages,
            "eval_loss": self.eval_loss,
            "accuracy": self.accuracy,
            "dense_accuracy": self.dense_metric,
            "dense_eval_loss": self.dense_eval_loss,
            "recovery": self.recovery,
            "sparse_beats_dense_eval_loss": self.regularized,
        }


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def calibrate(cfg: ModelConfig, params: Mapping, stream: np.ndarray, n_samples: int, seq_len: int,
              seed: int) -> CalibrationSet:
    """Layer inputs of the dense runtime model over random windows of ``stream``."""
    rng = Rng(seed).substream("calibration")
    starts = rng.integers(0, stream.size - seq_len, size=n_samples)
    seqs = [stream[s : s + seq_len] for s in starts]
    acts = capture_inputs(ToyTransformer(cfg, params), seqs)
    return CalibrationSet(acts, n_samples, seq_len)


def _profile(kind: str, cfg: ModelConfig, params: Mapping, target: float, calib: CalibrationSet | None):
    layers = {n: params[n] for n in linear_names(cfg)}
    if kind == "owl":
        return profile_owl(calib, layers, target)
    return profile_uniform(layers, target)


def _eval_record(name: str, cfg: ModelConfig, params: Mapping, mask, stream, tcfg: TrainConfig, steps: int) -> dict:
    m = evaluate(TorchTransformer(cfg, params), stream, tcfg.seq_len, tcfg.eval_windows)
    return {
        "stage": name,
        "eval_loss": m["loss"],
        "accuracy": m["accuracy"],
        "sparsity": mask.sparsity() if mask is not None else 0.0,
        "steps": steps,
    }


def one_shot_prune(cfg: ModelConfig, params: Mapping, target: float, calib_stream: np.ndarray,
                   fcfg: FinetuneConfig, seed: int, mask: SparsityMask | None = None):
    """Prune every linear layer in one pass; returns ``(params, mask, reports)``."""
    need_calib = fcfg.method == Method.OBS or fcfg.profile == "owl"
    calib = calibrate(cfg, params, calib_stream, fcfg.calib_samples, fcfg.calib_seq_len, seed) if need_calib else None
    profile = _profile(fcfg.profile, cfg, params, target, calib)
    return prune_weights(params, profile, fcfg.method, calib, fcfg.damp, fcfg.scope, mask)


def cubic_schedule(target: float, stages: int) -> list:
    """Sparsity after each of ``stages`` evenly spaced pruning events: ``s·(1 − (1 − k/n)³)``."""
    return [target * (1.0 - (1.0 - k / stages) ** 3) for k in range(1, stages + 1)]


def _split_steps(total: int, parts: int) -> list:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


# ---------------------------------------------------------------------------
# sparse pretraining
# ---------------------------------------------------------------------------


def sparse_pretrain(cfg: ModelConfig, params: Mapping, data: DataMixture, targets: Sequence[float],
                    tcfg: TrainConfig, seed: int, fcfg: FinetuneConfig = FinetuneConfig(),
                    eval_stream: np.ndarray | None = None, log: Callable[[dict], None] | None = None):
    """Iterative prune-then-train on the pretraining mixture; returns ``(ModelState, stage metrics)``.

    Each stage trains with its mask frozen until the eval loss stops improving
    (``tcfg.patience``) or ``tcfg.steps`` run out.
    """
    calib_stream = np.concatenate([s.tokens for s in data.sources])
    if eval_stream is None:
        eval_stream = calib_stream
    stage_idx = iter(range(len(targets)))

    def trainer(weights, mask):
        i = next(stage_idx)
        return train(cfg, weights, data, tcfg, seed * 1000 + i, mask=mask, eval_stream=eval_stream, log=log)

    def calib_for(weights):
        return calibrate(cfg, weights, calib_stream, fcfg.calib_samples, fcfg.calib_seq_len, seed)

    profile_for = (lambda t: _profile(fcfg.profile, cfg, params, t, calib_for(params)) if fcfg.profile == "owl"
                   else profile_uniform({n: params[n] for n in linear_names(cfg)}, t))
    stages = iterative_prune_schedule(params, targets, trainer, profile_for, fcfg.method,
                                      calib_for if fcfg.method == Method.OBS else None, fcfg.damp, fcfg.scope)
    records = [{"stage": f"sparse-pretrain@{st.target:g}", "sparsity": st.mask.sparsity(),
                "eval_loss": st.metrics.get("eval_loss"), "steps": st.metrics["steps"]} for st in stages]
    last = stages[-1]
    return ModelState(last.weights, last.mask), records


# ---------------------------------------------------------------------------
# fine-tuning modes
# ---------------------------------------------------------------------------


def _check_inputs(mode: FinetuneMode, start: ModelState, target: float):
    if mode == FinetuneMode.SPARSE_PRETRAINED_THEN_SPARSE_FT:
        if not start.sparse:
            raise ModeError(f"mode {mode.value} needs a sparse pretrained checkpoint with a frozen mask")
        if abs(start.mask.sparsity() - target) > 0.01:
            raise ModeError(f"mode {mode.value}: checkpoint sparsity {start.mask.sparsity():.4f} "
                            f"does not match target {target:.4f}")
    elif start.sparse:
        raise ModeError(f"mode {mode.value} starts from a dense checkpoint, got a sparse one")


def dense_finetune(cfg: ModelConfig, params: Mapping, task: TaskData, tcfg: TrainConfig, seed: int, log=None):
    return train(cfg, params, task.as_mixture(), tcfg, seed, eval_stream=task.eval, log=log)


def run_finetune(mode: FinetuneMode | str, cfg: ModelConfig, start: ModelState, task: TaskData, target: float,
                 fcfg: FinetuneConfig = FinetuneConfig(), seed: int = 0, reference: Mapping | None = None,
                 teacher: Mapping | None = None, log: Callable[[dict], None] | None = None) -> FinetuneResult:
    """Run one pipeline's stage sequence on the task.

    ``reference`` is the dense fine-tuned model used for recovery and as the
    default distillation teacher; modes starting dense compute it when absent.
    ``teacher`` overrides the teacher when ``fcfg.distill.teacher`` is
    ``"dense-base"`` and the start model is sparse.
    """
    mode = FinetuneMode(mode)
    if not 0.0 <= target < 1.0:
        raise ValueError(f"target sparsity must lie in [0, 1), got {target}")
    _check_inputs(mode, start, target)
    tcfg = fcfg.train
    data = task.as_mixture()
    result = FinetuneResult(mode, start)

    def stage(name, params, mask, steps):
        rec = _eval_record(name, cfg, params, mask, task.eval, tcfg, steps)
        result.stages.append(rec)
        if log is not None:
            log({"event": "stage", "mode": mode.value, **rec})

    def get_reference():
        nonlocal reference
        if reference is None:
            if start.sparse:
                return None
            reference, _ = dense_finetune(cfg, start.params, task, tcfg, seed)
        return reference

    def loss_fn():
        if fcfg.distill is None:
            return default_loss
        if fcfg.distill.teacher == "dense-finetuned":
            t = get_reference()
        else:
            t = teacher if teacher is not None else (None if start.sparse else start.params)
        if t is None:
            raise ModeError(f"mode {mode.value}: distillation teacher {fcfg.distill.teacher!r} was not supplied")
        return distill_loss_fn(TorchTransformer(cfg, t), fcfg.distill)

    if mode in (FinetuneMode.DENSE_THEN_ONESHOT, FinetuneMode.ONESHOT_THEN_SPARSE_FT):
        dense = get_reference()
        stage("dense-ft", dense, None, tcfg.steps)
        if target > 0:
            params, mask, _ = one_shot_prune(cfg, dense, target, task.train, fcfg, seed)
        else:
            params, mask = dict(dense), SparsityMask.from_weights(dense, linear_names(cfg))
        stage("one-shot", params, mask, 0)
        if mode == FinetuneMode.ONESHOT_THEN_SPARSE_FT:
            params, m = train(cfg, params, data, tcfg, seed + 1, mask=mask, eval_stream=task.eval,
                              loss_fn=loss_fn(), log=log)
            stage("sparse-ft", params, mask, m["steps"])
    elif mode == FinetuneMode.PRUNE_DURING_FINETUNE:
        lf = loss_fn()
        n = fcfg.prune_stages
        ramp = int(round(tcfg.steps * fcfg.prune_end))
        segments = _split_steps(ramp, n) + [tcfg.steps - ramp]
        params, mask = dict(start.params), None
        seg_cfg = replace(tcfg, patience=None)
        rng_base = seed * 7919
        for i, steps in enumerate(segments):
            if steps:
                params, _ = train(cfg, params, data, replace(seg_cfg, steps=steps), rng_base + i, mask=mask,
                                  eval_stream=None, loss_fn=lf)
            if i < n:
                s = cubic_schedule(target, n)[i]
                params, mask, _ = prune_weights(params, profile_uniform({k: params[k] for k in linear_names(cfg)}, s),
                                                Method.MAGNITUDE, None, fcfg.damp, fcfg.scope, mask)
        stage("gradual-ft", params, mask, tcfg.steps)
    else:
        params, mask = dict(start.params), start.mask
        params, m = train(cfg, params, data, tcfg, seed + 1, mask=mask, eval_stream=task.eval,
                          loss_fn=loss_fn(), log=log)
        stage("sparse-ft", params, mask, m["steps"])

    result.state = ModelState(params, mask)
    ref = get_reference()
    if ref is not None:
        r = _eval_record("dense-reference", cfg, ref, None, task.eval, tcfg, tcfg.steps)
        result.dense_metric, result.dense_eval_loss = r["accuracy"], r["eval_loss"]
    return result
