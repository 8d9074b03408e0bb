"""Multi-task prediction heads and the uncertainty-weighted loss."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .engine import LEAKY_SLOPE, leaky_relu, linear
from .errors import ShapeMismatch

log = logging.getLogger(__name__)

TASKS = ("bitrate", "jitter", "fps", "loss")
REGRESSION_TASKS = TASKS[:3]
HIDDEN = 64
POS_WEIGHT_RANGE = (1.0, 1000.0)


class TaskHeads(nn.Module):
    """One two-layer FNN per task over a flow's n-value encoding."""

    def __init__(self, n: int = 128, hidden: int = HIDDEN, dtype=torch.float64,
                 generator: torch.Generator | None = None, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.n = n
        self.slope = slope

        def uniform(*shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return nn.Parameter((torch.rand(*shape, dtype=dtype, generator=generator) * 2 - 1) * bound)

        self.w1 = nn.ParameterDict({t: uniform(n, hidden, fan_in=n) for t in TASKS})
        self.b1 = nn.ParameterDict({t: nn.Parameter(torch.zeros(hidden, dtype=dtype)) for t in TASKS})
        self.w2 = nn.ParameterDict({t: uniform(hidden, 1, fan_in=hidden) for t in TASKS})
        self.b2 = nn.ParameterDict({t: nn.Parameter(torch.zeros(1, dtype=dtype)) for t in TASKS})

    def forward(self, enc: torch.Tensor) -> dict[str, torch.Tensor]:
        """Raw outputs per task, shape (L,). The loss entry is a logit."""
        if enc.shape[-1] != self.n:
            raise ShapeMismatch(f"encoding length {enc.shape[-1]} != {self.n}")
        out = {}
        for t in TASKS:
            hid = leaky_relu(linear(enc, self.w1[t], self.b1[t]), self.slope)
            out[t] = linear(hid, self.w2[t], self.b2[t]).squeeze(-1)
        return out


def heads_forward(encoding: torch.Tensor, heads: TaskHeads) -> tuple[float, float, float, float]:
    """(bitrate, jitter, fps, loss probability) for a single flow encoding."""
    if encoding.ndim != 1:
        raise ShapeMismatch("heads_forward takes one encoding vector")
    out = heads(encoding.unsqueeze(0))
    return (
        out["bitrate"].item(),
        out["jitter"].item(),
        out["fps"].item(),
        torch.sigmoid(out["loss"]).item(),
    )


class TaskWeights(nn.Module):
    """Learnable log-variance s_t per task, plus the fixed positive-class weight."""

    def __init__(self, pos_weight: float = 1.0, dtype=torch.float64):
        super().__init__()
        self.s = nn.Parameter(torch.zeros(len(TASKS), dtype=dtype))
        self.register_buffer("pos_weight", torch.tensor(float(pos_weight), dtype=dtype))


@dataclass
class Targets:
    """Labels and masks of a set of samples as aligned tensors."""

    bitrate: torch.Tensor
    jitter: torch.Tensor
    fps: torch.Tensor
    loss: torch.Tensor
    jitter_mask: torch.Tensor
    fps_mask: torch.Tensor

    def mask(self, task: str) -> torch.Tensor:
        if task == "jitter":
            return self.jitter_mask
        if task == "fps":
            return self.fps_mask
        return torch.ones_like(self.jitter_mask)

    @classmethod
    def cat(cls, parts: list["Targets"]) -> "Targets":
        return cls(*(torch.cat([getattr(p, f) for p in parts]) for f in cls.__dataclass_fields__))


def weighted_bce_with_logits(logit: torch.Tensor, y: torch.Tensor, pos_weight) -> torch.Tensor:
    # softplus(-z) = -log sigmoid(z), softplus(z) = -log(1 - sigmoid(z))
    return pos_weight * y * F.softplus(-logit) + (1 - y) * F.softplus(logit)


def task_losses(preds: dict[str, torch.Tensor], targets: Targets, pos_weight) -> dict[str, torch.Tensor | None]:
    """Mean loss per task over unmasked samples; None when a task has none."""
    out: dict[str, torch.Tensor | None] = {}
    for t in TASKS:
        m = targets.mask(t)
        if not bool(m.any()):
            out[t] = None
            continue
        if t == "loss":
            per = weighted_bce_with_logits(preds[t][m], targets.loss[m], pos_weight)
        else:
            per = (preds[t][m] - getattr(targets, t)[m]).abs()
        out[t] = per.mean()
    return out


def multitask_loss(preds: dict[str, torch.Tensor], targets: Targets, weights: TaskWeights
                   ) -> tuple[torch.Tensor, dict[str, float | None]]:
    """sum_t exp(-s_t) L_t + s_t over tasks that have unmasked samples."""
    losses = task_losses(preds, targets, weights.pos_weight)
    total = weights.s.new_zeros(())
    for i, t in enumerate(TASKS):
        if losses[t] is not None:
            s = weights.s[i]
            total = total + torch.exp(-s) * losses[t] + s
    return total, {t: None if v is None else float(v.detach()) for t, v in losses.items()}


def compute_pos_weight(loss_labels) -> float:
    y = np.asarray(loss_labels, dtype=bool)
    pos = int(y.sum())
    if pos == 0:
        log.warning("no lossy samples in the training split; pos_weight = 1")
        return 1.0
    lo, hi = POS_WEIGHT_RANGE
    return float(min(max((len(y) - pos) / pos, lo), hi))
