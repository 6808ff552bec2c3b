"""Entropy-based per-sample teacher selection.

A teacher's impurity on a sample is the Shannon entropy of its predictive
distribution, normalized by ln(num_classes) so teachers with different class
counts compete on one [0, 1] scale. The least-impure (most decided) teacher
wins; exact ties go to the lowest teacher index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AlignmentError, NormalizationError, SelectionError, ShapeError

ENTROPY_CLAMP = 1e-12
_SUM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class ImpurityScore:
    raw_entropy: float
    normalized: float
    teacher_index: int
    task_id: str


def _validate_probs(p: np.ndarray) -> None:
    if p.ndim == 1:
        p = p[None, :]
    if p.shape[-1] < 2:
        raise ShapeError(f"need at least 2 classes, got {p.shape[-1]}")
    if np.any(p < 0):
        raise NormalizationError("negative probability")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > _SUM_TOLERANCE):
        worst = float(sums.flat[int(np.argmax(np.abs(sums - 1.0)))])
        raise NormalizationError(f"probabilities sum to {worst}, not 1")


def entropy_impurity(probs, clamp: float = ENTROPY_CLAMP) -> float:
    """-sum(p * log(max(p, clamp))); the p=0 terms contribute exactly 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError(f"probs must be a vector, got shape {p.shape}")
    _validate_probs(p)
    return float(-(p * np.log(np.maximum(p, clamp))).sum()) + 0.0


def batch_impurity(probs: np.ndarray, clamp: float = ENTROPY_CLAMP) -> np.ndarray:
    """Row-wise raw entropy of an [N, C] probability matrix."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError(f"probs must be [N, C], got shape {p.shape}")
    _validate_probs(p)
    return -(p * np.log(np.maximum(p, clamp))).sum(axis=1) + 0.0


def normalized_batch_impurity(probs: np.ndarray, clamp: float = ENTROPY_CLAMP) -> np.ndarray:
    return batch_impurity(probs, clamp) / math.log(np.asarray(probs).shape[-1])


def select_from_impurities(entries: Sequence[tuple[int, np.ndarray]]) -> np.ndarray:
    """Per-sample argmin over (teacher_index, impurity[N]) rows.

    Exact ties resolve to the lowest teacher index. The winner is invariant
    under any strictly increasing transform applied to every row.
    """
    if not entries:
        raise SelectionError("no teachers to select from")
    order = sorted(range(len(entries)), key=lambda i: entries[i][0])
    indices = np.asarray([entries[i][0] for i in order])
    rows = [np.asarray(entries[i][1], dtype=np.float64) for i in order]
    n = rows[0].shape[0]
    if any(r.ndim != 1 or r.shape[0] != n for r in rows):
        raise AlignmentError("impurity rows disagree on sample count")
    stacked = np.stack(rows)  # sorted by teacher index; argmin takes the first
    return indices[np.argmin(stacked, axis=0)]


def select_teacher(
    entries: Sequence[tuple[int, str, np.ndarray]], clamp: float = ENTROPY_CLAMP
) -> ImpurityScore:
    """Pick the least normalized-impurity entry for one sample.

    Entries are (teacher_index, task_id, probability vector); class counts may
    differ between entries.
    """
    if not entries:
        raise SelectionError("no teachers to select from")
    scored = []
    for teacher_index, task_id, probs in entries:
        raw = entropy_impurity(probs, clamp)
        normalized = raw / math.log(len(np.asarray(probs)))
        scored.append(ImpurityScore(raw, normalized, teacher_index, task_id))
    return min(scored, key=lambda s: (s.normalized, s.teacher_index))


def select_batch(
    entries: Sequence[tuple[int, str, np.ndarray]], clamp: float = ENTROPY_CLAMP
) -> np.ndarray:
    """Vectorized selection: one winning teacher index per sample.

    Entries are (teacher_index, task_id, [N, C] probabilities); every entry
    must cover the same N samples.
    """
    if not entries:
        raise SelectionError("no teachers to select from")
    n = np.asarray(entries[0][2]).shape[0]
    rows = []
    for teacher_index, _task_id, probs in entries:
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != n:
            raise AlignmentError(
                f"teacher {teacher_index} supplies {p.shape} probabilities, expected {n} rows"
            )
        rows.append((teacher_index, normalized_batch_impurity(p, clamp)))
    return select_from_impurities(rows)
