"""Feature-alignment bridges between teacher and student blocks.

A bridge pairs two trainable 1x1-conv alignment maps (one per side) that
project both nets' block features into a shared aligned channel space. The
transfer loss pulls the student's aligned map toward the teacher's; a soft
regularizer pushes every alignment row toward unit squared norm so the
all-zero collapse solution costs 2.0 per bridge instead of 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocknet import he_uniform
from .errors import ShapeError, SpecError
from .tensor import Tensor

STUDENT_SIDE = "student"
TEACHER_SIDE = "teacher"

# Seeded alignment maps start at a fraction of the He-uniform scale. Full-scale
# random maps make the transfer loss the loudest term at step 0, and on weak
# (soft-trained) sources its cheapest descent direction is the degenerate one:
# rows shrink while student features are driven toward zero, which kills the
# early blocks before the logit loss can shape them. Starting small keeps the
# transfer term quiet at first; the unit-row-norm regularizer then grows the
# maps back over the first few hundred steps.
INIT_SCALE = 0.3


@dataclass
class FAWeights:
    """One side's alignment map: [C_out, C_in], used as a 1x1 conv kernel."""

    weight: Tensor
    side: str
    block_index: int

    def __post_init__(self):
        if self.side not in (STUDENT_SIDE, TEACHER_SIDE):
            raise SpecError(f"side must be student or teacher, got {self.side!r}")
        if self.block_index < 0:
            raise SpecError(f"block_index must be non-negative, got {self.block_index}")
        if self.weight.ndim != 2:
            raise ShapeError(f"alignment weight must be [C_out, C_in], got {self.weight.shape}")


def make_fa(
    c_out: int,
    c_in: int,
    side: str,
    block_index: int,
    rng: np.random.Generator | None = None,
) -> FAWeights:
    """Scaled-down seeded He-uniform init by default (see INIT_SCALE); zeros
    when no generator is given."""
    if c_out < 1 or c_in < 1:
        raise SpecError(f"alignment needs positive channel counts, got {c_out}x{c_in}")
    data = (
        np.zeros((c_out, c_in))
        if rng is None
        else INIT_SCALE * he_uniform(rng, (c_out, c_in), c_in)
    )
    return FAWeights(weight=T.parameter(data), side=side, block_index=block_index)


def fa_forward(fa: FAWeights, features: Tensor) -> Tensor:
    """Align [N, C_in, H, W] features to [N, C_out, H, W] via 1x1 convolution."""
    if features.ndim != 4:
        raise ShapeError(f"features must be [N, C, H, W], got {features.shape}")
    c_out, c_in = fa.weight.shape
    if features.shape[1] != c_in:
        raise ShapeError(
            f"{fa.side} alignment at block {fa.block_index} expects {c_in} channels, "
            f"got {features.shape[1]}"
        )
    kernel = T.reshape(fa.weight, (c_out, c_in, 1, 1))
    return T.conv2d(features, kernel, stride=1, padding=0)


def transfer_loss(student_aligned: Tensor, teacher_aligned: Tensor) -> Tensor:
    """Squared distance between aligned maps, normalized per sample by C*H*W
    and averaged over the batch (equivalently: the mean over all elements)."""
    if student_aligned.shape != teacher_aligned.shape:
        raise ShapeError(
            f"aligned maps disagree: {student_aligned.shape} vs {teacher_aligned.shape}"
        )
    if student_aligned.ndim != 4:
        raise ShapeError(f"aligned maps must be [N, C, H, W], got {student_aligned.shape}")
    diff = T.sub(student_aligned, teacher_aligned)
    return T.reduce("mean", T.mul(diff, diff))


def weight_regularization(fa: FAWeights) -> Tensor:
    """Mean over output channels of (sum_in w^2 - 1)^2.

    Exactly 0 when every row has unit squared norm; exactly 1 on all zeros.
    """
    w = fa.weight
    row_norms = T.reduce("sum", T.mul(w, w), axes=(1,))
    dev = T.sub(row_norms, T.constant(np.ones(w.shape[0])))
    return T.reduce("mean", T.mul(dev, dev))


def bridge_block_loss(
    student_fa: FAWeights,
    teacher_fa: FAWeights,
    student_features: Tensor,
    teacher_features: Tensor,
) -> tuple[Tensor, Tensor]:
    """One block's (transfer, regularization) pair; both sides are regularized."""
    if student_fa.weight.shape[0] != teacher_fa.weight.shape[0]:
        raise ShapeError(
            f"aligned channel mismatch: student {student_fa.weight.shape[0]} vs "
            f"teacher {teacher_fa.weight.shape[0]}"
        )
    aligned_s = fa_forward(student_fa, student_features)
    aligned_t = fa_forward(teacher_fa, teacher_features)
    l_a = transfer_loss(aligned_s, aligned_t)
    l_reg = T.add(weight_regularization(student_fa), weight_regularization(teacher_fa))
    return l_a, l_reg
