"""Heatmap supervision, output distillation and codebook token selection."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from . import tensor as T
from .exceptions import ShapeError, UsageError
from .tensor import Tensor


def mse_heatmap_loss(pred: Tensor, target, joint_mask=None) -> Tensor:
    """Mean squared error over the unmasked joint channels (axis 1)."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    return T.mse(pred, target, joint_mask)


def output_distillation_loss(student: Tensor, teacher) -> Tensor:
    """MSE(student, teacher) with the teacher held constant."""
    teacher = teacher.detach() if isinstance(teacher, Tensor) else Tensor(teacher)
    if student.shape != teacher.shape:
        raise ShapeError(f"student {student.shape} and teacher {teacher.shape} differ")
    return T.mse(student, teacher)


def total_loss(pred: Tensor, target, teacher=None, distill_weight: float = 0.0, joint_mask=None) -> Tensor:
    loss = mse_heatmap_loss(pred, target, joint_mask)
    if teacher is not None and distill_weight:
        loss = loss + output_distillation_loss(pred, teacher) * distill_weight
    return loss


@dataclass
class TokenCodebook:
    """Candidate tokens plus the renderer mapping (token, context) to a heatmap."""

    tokens: Sequence[Any]
    renderer: Callable[[Any, Any], np.ndarray]

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise UsageError("token codebook must not be empty")

    def render(self, index: int, context) -> np.ndarray:
        return np.asarray(self.renderer(self.tokens[index], context), dtype=np.float64)


def select_token(codebook: TokenCodebook, context, target):
    """Exhaustive argmin of MSE(render(t), target); ties keep the first index.

    Returns ``(index, token, mse)``.
    """
    if len(codebook.tokens) == 0:
        raise UsageError("token codebook must not be empty")
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    best_index, best_value = -1, np.inf
    for i in range(len(codebook.tokens)):
        rendered = codebook.render(i, context)
        if rendered.shape != target.shape:
            raise ShapeError(f"token {i} renders {rendered.shape}, target is {target.shape}")
        value = float(np.mean((rendered - target) ** 2))
        if value < best_value:
            best_index, best_value = i, value
    return best_index, codebook.tokens[best_index], best_value
