"""Autograd twin of the inference model, used for training and distillation."""

from __future__ import annotations

import math
from collections.abc import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..model import ModelConfig, check_params, linear_names, param_shapes


def _key(name: str) -> str:
    return name.replace(".", "__")


class TorchTransformer(nn.Module):
    """Same architecture and parameter names as the runtime model."""

    def __init__(self, cfg: ModelConfig, params: Mapping, dtype=torch.float32):
        super().__init__()
        check_params(cfg, params)
        self.cfg = cfg
        self.names = list(param_shapes(cfg))
        for name in self.names:
            t = torch.tensor(np.asarray(params[name]), dtype=dtype)
            self.register_parameter(_key(name), nn.Parameter(t))
        causal = torch.ones(cfg.max_ctx, cfg.max_ctx, dtype=torch.bool).tril()
        self.register_buffer("causal", causal, persistent=False)

    def p(self, name: str) -> nn.Parameter:
        return getattr(self, _key(name))

    def named_model_params(self):
        return [(name, self.p(name)) for name in self.names]

    def linear_params(self) -> dict:
        return {name: self.p(name) for name in linear_names(self.cfg)}

    def to_params(self) -> dict:
        return {name: self.p(name).detach().cpu().numpy().astype(np.float32) for name in self.names}

    def _norm(self, x, gain):
        ms = x.pow(2).mean(dim=-1, keepdim=True)
        return x * torch.rsqrt(ms + self.cfg.norm_eps) * gain

    def forward(self, ids: torch.Tensor, return_features: bool = False):
        """``ids`` is (batch, seq). Returns logits, plus the residual stream after each block."""
        cfg = self.cfg
        b, t = ids.shape
        x = self.p("embed.tok")[ids] + self.p("embed.pos")[:t][None]
        feats = []
        hd = cfg.head_dim
        mask = self.causal[:t, :t]
        for i in range(cfg.n_layers):
            pre = f"layers.{i}"
            h = self._norm(x, self.p(f"{pre}.norm1"))
            q, k, v = (F.linear(h, self.p(f"{pre}.attn.{n}")).view(b, t, cfg.n_heads, hd).transpose(1, 2)
                       for n in ("q", "k", "v"))
            att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
            att = att.masked_fill(~mask, float("-inf")).softmax(dim=-1)
            a = (att @ v).transpose(1, 2).reshape(b, t, cfg.d_model)
            x = x + F.linear(a, self.p(f"{pre}.attn.o"))
            h = self._norm(x, self.p(f"{pre}.norm2"))
            x = x + F.linear(F.relu(F.linear(h, self.p(f"{pre}.mlp.up"))), self.p(f"{pre}.mlp.down"))
            feats.append(x)
        logits = F.linear(self._norm(x, self.p("norm_f")), self.p("head"))
        return (logits, feats) if return_features else logits


def lm_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))
