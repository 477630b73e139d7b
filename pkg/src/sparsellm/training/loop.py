"""Mask-frozen training: the masked SGD step, distillation loss and a small training driver."""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ShapeError, TrainingError
from ..masks import SparsityMask
from ..model import ModelConfig
from ..tensors import Rng
from .data import Batch, DataMixture, eval_windows, sample_mixture
from .torch_model import TorchTransformer, lm_loss


def masked_sgd_update(theta: torch.Tensor, grad: torch.Tensor, mask: torch.Tensor | None, eta: float,
                      velocity: torch.Tensor | None = None, momentum: float = 0.0) -> None:
    """In place: ``g ← g ⊙ M``; ``θ ← θ − η g`` (or the momentum step); ``θ ← θ ⊙ M``.

    With momentum the velocity is masked too, so optimizer state at pruned
    positions stays exactly zero.
    """
    with torch.no_grad():
        if mask is not None:
            grad.mul_(mask)
        step = grad
        if velocity is not None:
            velocity.mul_(momentum).add_(grad)
            if mask is not None:
                velocity.mul_(mask)
            step = velocity
        theta.sub_(eta * step)
        if mask is not None:
            theta.mul_(mask)


@dataclass
class TrainState:
    """θ lives in ``model``; ``mask`` (M) is frozen for the life of the state."""

    model: TorchTransformer
    mask: SparsityMask | None
    eta: float
    step: int = 0
    num_steps: int = 0
    momentum: float = 0.0
    velocity: dict = field(default_factory=dict)
    _mask_t: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mask is not None:
            lin = self.model.linear_params()
            for name in self.mask:
                if name not in lin:
                    raise ShapeError(f"mask names unknown layer {name}")
                m = self.mask[name]
                if tuple(m.shape) != tuple(lin[name].shape):
                    raise ShapeError(f"layer {name}: mask {m.shape} vs weight {tuple(lin[name].shape)}")
                self._mask_t[name] = torch.tensor(m, dtype=lin[name].dtype)
            with torch.no_grad():
                for name, m in self._mask_t.items():
                    lin[name].mul_(m)
        if self.momentum:
            self.velocity = {n: torch.zeros_like(p) for n, p in self.model.named_model_params()}

    @property
    def theta(self) -> dict:
        return self.model.to_params()

    def mask_tensor(self, name):
        return self._mask_t.get(name)

    def zeros_hold(self) -> bool:
        """``θ ⊙ (1 − M) = 0`` on every masked layer."""
        lin = self.model.linear_params()
        return all(not torch.any(lin[n].detach()[m == 0] != 0) for n, m in self._mask_t.items())


LossFn = Callable[[TorchTransformer, Batch], torch.Tensor]


def default_loss(model: TorchTransformer, batch: Batch) -> torch.Tensor:
    ids = torch.from_numpy(batch.tokens)
    return lm_loss(model(ids[:, :-1]), ids[:, 1:])


def sparse_train_step(state: TrainState, batch: Batch, loss_fn: LossFn = default_loss) -> TrainState:
    """forward → loss → backward → grad ⊙ M → θ ← θ − η·grad → θ ← θ ⊙ M."""
    model = state.model
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model, batch)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} at step {state.step}")
    loss.backward()
    for name, p in model.named_model_params():
        if p.grad is None:
            continue
        if not torch.all(torch.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in layer {name} at step {state.step}")
        masked_sgd_update(p, p.grad, state.mask_tensor(name), state.eta,
                          state.velocity.get(name), state.momentum)
    state.step += 1
    state.last_loss = float(loss.item())
    return state


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DistillConfig:
    lambda_logit: float = 1.0
    lambda_feature: float = 1.0
    temperature: float = 2.0
    teacher: str = "dense-finetuned"  # or "dense-base"
    eps: float = 1e-6

    def __post_init__(self):
        if self.lambda_logit < 0 or self.lambda_feature < 0:
            raise ValueError("distillation weights must be >= 0")
        if self.lambda_logit == 0 and self.lambda_feature == 0:
            raise ValueError("distillation needs lambda_logit > 0 or lambda_feature > 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.teacher not in ("dense-finetuned", "dense-base"):
            raise ValueError(f"teacher must be 'dense-finetuned' or 'dense-base', got {self.teacher!r}")


def squarehead_loss(student_feats: Sequence[torch.Tensor], teacher_feats: Sequence[torch.Tensor],
                    student_logits: torch.Tensor, teacher_logits: torch.Tensor, task_loss: torch.Tensor,
                    cfg: DistillConfig) -> torch.Tensor:
    """``task + λ_logit·KL(soft teacher ‖ soft student) + λ_feat·Σ_l ‖f_s − f_t‖² / (‖f_t‖² + ε)``.

    The KL is averaged over token positions; teacher tensors are treated as constants.
    """
    if len(student_feats) != len(teacher_feats):
        raise ShapeError(f"student has {len(student_feats)} feature layers, teacher {len(teacher_feats)}")
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"logits shape {tuple(student_logits.shape)} vs teacher {tuple(teacher_logits.shape)}")
    total = task_loss
    if cfg.lambda_logit:
        t = cfg.temperature
        log_ps = F.log_softmax(student_logits / t, dim=-1)
        log_pt = F.log_softmax(teacher_logits.detach() / t, dim=-1)
        kl = (log_pt.exp() * (log_pt - log_ps)).sum(dim=-1).mean()
        total = total + cfg.lambda_logit * kl
    if cfg.lambda_feature:
        feat = student_logits.new_zeros(())
        for layer, (fs, ft) in enumerate(zip(student_feats, teacher_feats)):
            if fs.shape != ft.shape:
                raise ShapeError(f"feature layer {layer}: student {tuple(fs.shape)} vs teacher {tuple(ft.shape)}")
            ft = ft.detach()
            feat = feat + (fs - ft).pow(2).sum() / (ft.pow(2).sum() + cfg.eps)
        total = total + cfg.lambda_feature * feat
    return total


def distill_loss_fn(teacher: TorchTransformer, cfg: DistillConfig) -> LossFn:
    def fn(model: TorchTransformer, batch: Batch) -> torch.Tensor:
        ids = torch.from_numpy(batch.tokens)
        inp, tgt = ids[:, :-1], ids[:, 1:]
        logits, feats = model(inp, return_features=True)
        with torch.no_grad():
            t_logits, t_feats = teacher(inp, return_features=True)
        return squarehead_loss(feats, t_feats, logits, t_logits, lm_loss(logits, tgt), cfg)

    return fn


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 16
    seq_len: int = 64
    eval_every: int = 100
    eval_windows: int = 64
    patience: int | None = None  # evals without improvement before stopping; None = run all steps

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.seq_len < 1 or self.lr <= 0:
            raise ValueError("invalid training configuration")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


@torch.no_grad()
def evaluate(model: TorchTransformer, stream: np.ndarray, seq_len: int, max_windows: int | None = None,
             batch: int = 32) -> dict:
    """Mean next-token loss and accuracy over deterministic windows of ``stream``."""
    win = eval_windows(stream, seq_len, max_windows)
    total_loss, correct, count = 0.0, 0, 0
    for i in range(0, win.shape[0], batch):
        ids = torch.from_numpy(win[i : i + batch])
        logits = model(ids[:, :-1])
        tgt = ids[:, 1:]
        total_loss += F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), reduction="sum").item()
        correct += int((logits.argmax(-1) == tgt).sum())
        count += tgt.numel()
    return {"loss": total_loss / count, "accuracy": correct / count}


def train(cfg: ModelConfig, params: Mapping, data: DataMixture, tcfg: TrainConfig, seed: int,
          mask: SparsityMask | None = None, eval_stream: np.ndarray | None = None,
          loss_fn: LossFn = default_loss, on_step: Callable[[TrainState], None] | None = None,
          log: Callable[[dict], None] | None = None):
    """Run masked SGD; returns ``(params, metrics)``.

    With ``patience`` set and an eval stream, training stops once the eval loss
    has not improved for that many consecutive evaluations and the best
    parameters seen are returned (convergence in the iterative schedule).
    """
    model = TorchTransformer(cfg, params)
    state = TrainState(model, mask, tcfg.lr, 0, tcfg.steps, tcfg.momentum)
    rng = Rng(seed).substream("train-batches")
    history = []
    best, best_params, stale = math.inf, None, 0
    stopped_early = False

    def do_eval():
        nonlocal best, best_params, stale
        if eval_stream is None:
            return False
        m = evaluate(model, eval_stream, tcfg.seq_len, tcfg.eval_windows)
        m["step"] = state.step
        history.append(m)
        if log is not None:
            log({"event": "eval", **m})
        if m["loss"] < best - 1e-9:
            best, best_params, stale = m["loss"], model.to_params(), 0
        else:
            stale += 1
        return tcfg.patience is not None and stale >= tcfg.patience

    do_eval()
    for _ in range(tcfg.steps):
        batch = sample_mixture(data, rng, tcfg.batch_size, tcfg.seq_len)
        sparse_train_step(state, batch, loss_fn)
        if on_step is not None:
            on_step(state)
        if tcfg.eval_every and state.step % tcfg.eval_every == 0 and do_eval():
            stopped_early = True
            break
    if eval_stream is not None and (not history or history[-1]["step"] != state.step):
        do_eval()
    out = best_params if (tcfg.patience is not None and best_params is not None) else model.to_params()
    metrics = {
        "steps": state.step,
        "final_train_loss": getattr(state, "last_loss", None),
        "history": history,
        "stopped_early": stopped_early,
    }
    if history:
        metrics["eval_loss"] = best if tcfg.patience is not None else history[-1]["loss"]
    return out, metrics
