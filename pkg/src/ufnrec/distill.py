"""EMA teacher, soft labels and the consistency / final objectives."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .encoder import bce_loss, bce_with_logits, sigmoid
from .validation import ConfigError, check_interval


@dataclass(frozen=True)
class LossBreakdown:
    basic: float
    consistency: float
    alpha: float
    final: float


class EMATeacher:
    """Shadow copy of a student whose weights track it by exponential averaging."""

    def __init__(self, student: torch.nn.Module, decay: float = 0.999):
        self.decay = check_interval(decay, "decay", 0.0, 1.0)
        self.model = copy.deepcopy(student)
        self.model.eval()
        self.model.requires_grad_(False)

    def update(self, student: torch.nn.Module) -> "EMATeacher":
        ema_update(self, student)
        return self

    def soft_labels(self, seqs, items) -> torch.Tensor:
        return soft_labels(self.model, seqs, items)


@torch.no_grad()
def ema_update(teacher: EMATeacher, student: torch.nn.Module) -> EMATeacher:
    """``shadow <- d * shadow + (1 - d) * student`` for every parameter."""
    d = teacher.decay
    shadow = dict(teacher.model.named_parameters())
    current = dict(student.named_parameters())
    if shadow.keys() != current.keys():
        raise ConfigError("teacher and student parameter sets differ")
    for name, w in current.items():
        s = shadow[name]
        if s.shape != w.shape:
            raise ConfigError(f"shape mismatch for {name}: {tuple(s.shape)} vs {tuple(w.shape)}")
        s.copy_(d * s + (1.0 - d) * w)
    return teacher


@torch.no_grad()
def soft_labels(model: torch.nn.Module, seqs, items) -> torch.Tensor:
    """Sigmoid predictions of ``model`` in eval mode (no dropout, no graph).

    ``items`` has shape ``seqs.shape + (k,)``; the result has the same shape.
    """
    was_training = model.training
    model.eval()
    try:
        reps, _ = model(seqs)
        return torch.sigmoid(model.score_items(reps, items))
    finally:
        model.train(was_training)


def soft_label(teacher, user_seq, t: int, item: int) -> float:
    """Teacher prediction for one item after the first ``t`` items of ``user_seq``."""
    model = teacher.model if isinstance(teacher, EMATeacher) else teacher
    prefix = torch.as_tensor([list(user_seq[:t])], dtype=torch.long)
    items = torch.full(prefix.shape + (1,), int(item), dtype=torch.long)
    return float(soft_labels(model, prefix, items)[0, -1, 0])


def consistency_loss(student_logits, soft_labels):
    """Sum of soft-label BCE terms; 0 for an empty batch of false negatives."""
    if torch.is_tensor(student_logits):
        if student_logits.numel() == 0:
            return student_logits.new_zeros(())
        return bce_with_logits(student_logits, soft_labels).sum()
    x = np.asarray(student_logits, dtype=np.float64)
    if x.size == 0:
        return 0.0
    return float(np.sum(bce_loss(x, np.asarray(soft_labels, dtype=np.float64))))


def final_loss(basic, consistency, alpha: float) -> LossBreakdown:
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    b, c = float(basic), float(consistency)
    return LossBreakdown(b, c, float(alpha), b + alpha * c)


__all__ = [
    "EMATeacher",
    "LossBreakdown",
    "consistency_loss",
    "ema_update",
    "final_loss",
    "sigmoid",
    "soft_label",
    "soft_labels",
]
