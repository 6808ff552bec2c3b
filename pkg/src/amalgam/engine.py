"""Dual-stage knowledge amalgamation over frozen teacher pools.

The generic loop (train_amalgamate) trains one student against one or more
frozen teachers on unlabeled images. Per sample, the least-impure teacher is
selected (entropy of its predictive distribution, normalized by ln C); the
sample's loss is that teacher's block-wise transfer losses plus alignment
regularization plus the soft logit-matching term, every term from the same
selected teacher. Ablation flags replace selection with uniform averaging,
drop the bridges, or reduce the loss to classic logit matching.

Stage 1 amalgamates task-specific component nets from the sources covering
each user task; stage 2 amalgamates a widened multi-task target net from the
components. ``one_shot_amalgamate`` skips the intermediate step and selects
per task head among the sources covering that task.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np

from . import blocknet as B
from . import bridge as BR
from . import selector as S
from . import tensor as T
from .blocknet import BlockNet, BlockNetSpec, HeadSpec
from .errors import (
    ArityError,
    CoverageError,
    GeometryError,
    ShapeError,
    SizeError,
    SpecError,
)
from .tensor import SGD, Tape, Tensor


@dataclass(frozen=True)
class AmalgamConfig:
    """Knobs for one amalgamation (or supervised) training run."""

    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    widen_factor: float = B.DEFAULT_WIDEN_FACTOR
    aligned_channels: tuple[int, ...] | None = None  # default: student block widths
    entropy_clamp: float = S.ENTROPY_CLAMP
    disable_bridge: bool = False
    disable_selection: bool = False
    kd_only: bool = False
    per_task_selection: bool = False
    # Logit scales chase a moving equilibrium: stepped as fast as the net they
    # drag the soft target to zero and the student head collapses with it, so
    # they get their own small momentum-free steps (default lr / 20).
    scale_lr: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise SpecError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise SpecError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise SpecError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise SpecError(f"batch_size must be positive, got {self.batch_size}")
        if not self.widen_factor > 0:
            raise SpecError(f"widen_factor must be positive, got {self.widen_factor}")
        if not self.entropy_clamp > 0:
            raise SpecError(f"entropy_clamp must be positive, got {self.entropy_clamp}")
        if self.scale_lr is not None and not self.scale_lr > 0:
            raise SpecError(f"scale_lr must be positive when set, got {self.scale_lr}")

    @property
    def effective_scale_lr(self) -> float:
        return self.scale_lr if self.scale_lr is not None else self.lr / 20.0


@dataclass(frozen=True)
class StepRecord:
    """One optimizer step's loss parts; l_total re-sums from them within 1e-9."""

    epoch: int
    step: int
    l_a: tuple[float, ...]
    l_reg: tuple[float, ...]
    l_soft: float
    l_total: float
    selected: dict[str, tuple[int, ...]]  # selection stream ("*" or task) -> winners
    scales: dict[str, float]


@dataclass
class LossBreakdown:
    steps: list[StepRecord] = field(default_factory=list)

    def consistent(self, tol: float = 1e-9) -> bool:
        return all(
            abs(r.l_total - (sum(r.l_a) + sum(r.l_reg) + r.l_soft)) <= tol for r in self.steps
        )


def derive_seed(base: int, *tokens: int) -> int:
    """Stable child seed for a named stream; never uses python hash()."""
    return int(np.random.SeedSequence([base, *tokens]).generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# loss terms


def soft_target_loss(student_logits: Tensor, teacher_logits: Tensor, scale) -> Tensor:
    """Mean squared gap between student logits and scale * teacher logits,
    normalized per sample by the class count and averaged over the batch.
    ``scale`` is a trainable single-element tensor or a fixed float."""
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(
            f"logit shapes disagree: {student_logits.shape} vs {teacher_logits.shape}"
        )
    if student_logits.ndim != 2:
        raise ShapeError(f"logits must be [N, C], got {student_logits.shape}")
    diff = T.sub(student_logits, T.scale(teacher_logits, scale))
    return T.reduce("mean", T.mul(diff, diff))


def total_loss(
    bridge_terms: Sequence[tuple[Tensor, Tensor]], soft: Tensor, expected_blocks: int
) -> Tensor:
    """Sum of per-block (transfer + regularization) pairs plus the soft term."""
    if len(bridge_terms) != expected_blocks:
        raise ArityError(f"expected {expected_blocks} bridge terms, got {len(bridge_terms)}")
    if soft.size != 1:
        raise ArityError(f"soft loss must be scalar, got shape {soft.shape}")
    acc = soft
    for l_a, l_reg in bridge_terms:
        if l_a.size != 1 or l_reg.size != 1:
            raise ArityError("bridge terms must be scalars")
        acc = T.add(acc, T.add(l_a, l_reg))
    return acc


# ---------------------------------------------------------------------------
# the generic amalgamation loop


@dataclass
class _Group:
    """Samples of a batch supervised by one (teacher, task) pair."""

    teacher: int
    task: str
    rows: np.ndarray  # positions within the batch
    weight: float


def _shared_tasks(teacher: BlockNet, student: BlockNet) -> list[str]:
    return sorted(teacher.task_set & student.task_set)


def _validate_cohort(teachers: Sequence[BlockNet], student: BlockNet) -> list[list[str]]:
    if not teachers:
        raise CoverageError("no teachers supplied")
    shared = [_shared_tasks(t, student) for t in teachers]
    for ti, tasks in enumerate(shared):
        if not tasks:
            raise CoverageError(f"teacher {ti} shares no task with the student")
    covered = set().union(*[set(ts) for ts in shared])
    missing = sorted(student.task_set - covered)
    if missing:
        raise CoverageError(f"no teacher covers student task(s) {missing}")
    for ti, teacher in enumerate(teachers):
        if teacher.spec.input_shape != student.spec.input_shape:
            raise GeometryError(
                f"teacher {ti} input {teacher.spec.input_shape} differs from "
                f"student input {student.spec.input_shape}"
            )
        if teacher.spec.block_strides != student.spec.block_strides:
            raise GeometryError(
                f"teacher {ti} strides {teacher.spec.block_strides} differ from "
                f"student strides {student.spec.block_strides}"
            )
        for task in shared[ti]:
            t_classes = teacher.spec.head_for(task).num_classes
            s_classes = student.spec.head_for(task).num_classes
            if t_classes != s_classes:
                raise SpecError(
                    f"task {task!r}: teacher {ti} has {t_classes} classes, "
                    f"student has {s_classes}"
                )
    return shared


def _teacher_cache(
    teachers: Sequence[BlockNet],
    shared: list[list[str]],
    images: np.ndarray,
    bridged_blocks: int,
    chunk: int = 256,
):
    """Precompute every teacher's block maps and shared-task logits (frozen)."""
    maps: list[list[np.ndarray]] = []
    logits: list[dict[str, np.ndarray]] = []
    for ti, teacher in enumerate(teachers):
        m_parts: list[list[np.ndarray]] = [[] for _ in range(bridged_blocks)]
        l_parts: dict[str, list[np.ndarray]] = {task: [] for task in shared[ti]}
        for start in range(0, images.shape[0], chunk):
            feats = B.forward(teacher, Tensor(images[start : start + chunk]))
            for l in range(bridged_blocks):
                m_parts[l].append(feats.maps[l].data)
            for task in shared[ti]:
                l_parts[task].append(feats.logits[task].data)
        maps.append([np.concatenate(p) for p in m_parts])
        logits.append({task: np.concatenate(p) for task, p in l_parts.items()})
    return maps, logits


def _precompute_selection(
    mode: str,
    teachers: Sequence[BlockNet],
    student: BlockNet,
    shared: list[list[str]],
    cached_logits: list[dict[str, np.ndarray]],
    clamp: float,
):
    """Winners are fixed for the whole run because teachers are frozen.

    Returns (streams, task_choice): streams maps a selection stream name ("*"
    for the global one-teacher-per-sample rule, task ids for per-task mode) to
    a winner array [N]; task_choice[ti] gives, per sample, which shared task a
    globally selected multi-task teacher supervises.
    """
    impurity: list[dict[str, np.ndarray]] = []
    for ti in range(len(teachers)):
        rows = {}
        for task in shared[ti]:
            probs = T.softmax(Tensor(cached_logits[ti][task])).data
            rows[task] = S.normalized_batch_impurity(probs, clamp)
        impurity.append(rows)

    if mode == "per_task":
        streams = {}
        for task in sorted(student.task_set):
            entries = [
                (ti, impurity[ti][task]) for ti in range(len(teachers)) if task in shared[ti]
            ]
            streams[task] = S.select_from_impurities(entries)
        return streams, None

    # global rule: a teacher competes with its least-impure shared head
    best_rows = []
    task_choice = []
    for ti in range(len(teachers)):
        stacked = np.stack([impurity[ti][task] for task in shared[ti]])
        best_rows.append((ti, stacked.min(axis=0)))
        task_choice.append(np.argmin(stacked, axis=0))
    winners = S.select_from_impurities(best_rows)
    return {"*": winners}, task_choice


def _batch_groups(
    mode: str,
    batch_idx: np.ndarray,
    streams: dict[str, np.ndarray] | None,
    task_choice,
    teachers: Sequence[BlockNet],
    shared: list[list[str]],
) -> tuple[list[_Group], dict[str, tuple[int, ...]]]:
    n = batch_idx.shape[0]
    groups: list[_Group] = []
    selected: dict[str, tuple[int, ...]] = {}

    if mode in ("uniform", "kd"):
        rows = np.arange(n)
        for ti in range(len(teachers)):
            for task in shared[ti]:
                groups.append(_Group(ti, task, rows, 1.0 / (len(teachers) * len(shared[ti]))))
        return groups, selected

    if mode == "per_task":
        for task, winners in streams.items():
            batch_winners = winners[batch_idx]
            selected[task] = tuple(int(v) for v in batch_winners)
            for ti in range(len(teachers)):
                rows = np.flatnonzero(batch_winners == ti)
                if rows.size:
                    groups.append(_Group(ti, task, rows, rows.size / n))
        return groups, selected

    # global mode
    winners = streams["*"][batch_idx]
    selected["*"] = tuple(int(v) for v in winners)
    for ti in range(len(teachers)):
        rows = np.flatnonzero(winners == ti)
        if not rows.size:
            continue
        choice = task_choice[ti][batch_idx[rows]]
        for ci, task in enumerate(shared[ti]):
            task_rows = rows[choice == ci]
            if task_rows.size:
                groups.append(_Group(ti, task, task_rows, task_rows.size / n))
    return groups, selected


def train_amalgamate(
    teachers: Sequence[BlockNet],
    student: BlockNet,
    unlabeled: np.ndarray,
    config: AmalgamConfig,
) -> tuple[BlockNet, LossBreakdown]:
    """Train ``student`` against frozen ``teachers`` on unlabeled images.

    The student is mutated in place and also returned. Teacher parameters are
    never touched: their forward passes run off-tape and they are not in the
    optimizer. Identical inputs and config give bitwise-identical results.
    """
    shared = _validate_cohort(teachers, student)
    images = np.asarray(unlabeled, dtype=np.float64)
    if images.ndim != 4 or tuple(images.shape[1:]) != student.spec.input_shape:
        raise ShapeError(
            f"unlabeled images must be [N, {student.spec.input_shape}], got {images.shape}"
        )
    history = LossBreakdown()
    if config.epochs == 0:
        return student, history
    if images.shape[0] == 0:
        raise SizeError("cannot train on an empty unlabeled set")

    if config.kd_only:
        mode = "kd"
    elif config.disable_selection:
        mode = "uniform"
    elif config.per_task_selection:
        mode = "per_task"
    else:
        mode = "global"
    bridges_on = not (config.kd_only or config.disable_bridge)
    num_blocks = student.spec.num_blocks
    bridged = num_blocks - 1

    rng_bridges = np.random.default_rng(np.random.SeedSequence([config.seed, 101]))
    rng_batches = np.random.default_rng(np.random.SeedSequence([config.seed, 202]))

    params: dict[str, Tensor] = {f"student.{k}": v for k, v in student.params.items()}
    student_fa: list[list[BR.FAWeights]] = []
    teacher_fa: list[list[BR.FAWeights]] = []
    if bridges_on:
        aligned = config.aligned_channels or tuple(student.spec.block_channels[:bridged])
        if len(aligned) != bridged:
            raise SpecError(
                f"aligned_channels must give {bridged} widths, got {len(aligned)}"
            )
        for ti, teacher in enumerate(teachers):
            t_side, s_side = [], []
            for l in range(bridged):
                t_fa = BR.make_fa(
                    aligned[l], teacher.spec.block_channels[l], BR.TEACHER_SIDE, l, rng_bridges
                )
                s_fa = BR.make_fa(
                    aligned[l], student.spec.block_channels[l], BR.STUDENT_SIDE, l, rng_bridges
                )
                t_side.append(t_fa)
                s_side.append(s_fa)
                params[f"bridge.t{ti}.block{l}.teacher"] = t_fa.weight
                params[f"bridge.t{ti}.block{l}.student"] = s_fa.weight
            teacher_fa.append(t_side)
            student_fa.append(s_side)

    scales: dict[tuple[int, str], Tensor | float] = {}
    scale_entries: list[tuple[str, Tensor, int, str]] = []
    for ti in range(len(teachers)):
        for task in shared[ti]:
            if config.kd_only:
                scales[(ti, task)] = 1.0
            else:
                t = T.parameter(np.ones(1))
                scales[(ti, task)] = t
                scale_entries.append((f"scale.t{ti}.{task}", t, ti, task))

    opt = SGD(params, lr=config.lr, momentum=config.momentum)

    cached_maps, cached_logits = _teacher_cache(
        teachers, shared, images, bridged if bridges_on else 0
    )
    # The soft loss is quadratic in each logit scale, with curvature set by that
    # teacher head's mean squared logit, so a shared step size would slide a
    # sharp (large-logit) teacher's scale orders of magnitude faster than a
    # mild one; it can reach ~0 before the student's logits grow, freezing the
    # student on near-zero targets. Each scale therefore steps with its own
    # curvature-normalized rate, making calibration speed sharpness-invariant.
    scale_opts = [
        SGD(
            {name: t},
            lr=config.effective_scale_lr
            / max(1.0, float(np.mean(cached_logits[ti][task] ** 2))),
            momentum=0.0,
        )
        for name, t, ti, task in scale_entries
    ]
    if mode in ("global", "per_task"):
        streams, task_choice = _precompute_selection(
            mode, teachers, student, shared, cached_logits, config.entropy_clamp
        )
    else:
        streams, task_choice = None, None

    n_total = images.shape[0]
    step = 0
    for epoch in range(config.epochs):
        order = rng_batches.permutation(n_total)
        for start in range(0, n_total, config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            groups, selected = _batch_groups(
                mode, batch_idx, streams, task_choice, teachers, shared
            )
            la_agg = [0.0] * (bridged if bridges_on else 0)
            lreg_agg = [0.0] * (bridged if bridges_on else 0)
            soft_agg = 0.0
            tape = Tape()
            with tape:
                feats = B.forward(student, Tensor(images[batch_idx]))
                total: Tensor | None = None
                for g in groups:
                    terms: list[tuple[Tensor, Tensor]] = []
                    if bridges_on:
                        for l in range(bridged):
                            s_map = T.gather(feats.maps[l], g.rows)
                            t_map = Tensor(cached_maps[g.teacher][l][batch_idx[g.rows]])
                            l_a, l_reg = BR.bridge_block_loss(
                                student_fa[g.teacher][l], teacher_fa[g.teacher][l], s_map, t_map
                            )
                            terms.append((l_a, l_reg))
                            la_agg[l] += g.weight * l_a.item()
                            lreg_agg[l] += g.weight * l_reg.item()
                    s_logits = T.gather(feats.logits[g.task], g.rows)
                    t_logits = Tensor(cached_logits[g.teacher][g.task][batch_idx[g.rows]])
                    soft = soft_target_loss(s_logits, t_logits, scales[(g.teacher, g.task)])
                    soft_agg += g.weight * soft.item()
                    part = T.scale(
                        total_loss(terms, soft, bridged if bridges_on else 0), g.weight
                    )
                    total = part if total is None else T.add(total, part)
                assert total is not None
                T.backward(total, tape)
            scale_snapshot = {
                f"t{ti}.{task}": (float(v.data[0]) if isinstance(v, Tensor) else float(v))
                for (ti, task), v in scales.items()
            }
            history.steps.append(
                StepRecord(
                    epoch=epoch,
                    step=step,
                    l_a=tuple(la_agg),
                    l_reg=tuple(lreg_agg),
                    l_soft=soft_agg,
                    l_total=total.item(),
                    selected=selected,
                    scales=scale_snapshot,
                )
            )
            opt.step()
            for scale_opt in scale_opts:
                scale_opt.step()
            step += 1
    return student, history


# ---------------------------------------------------------------------------
# supervised training and evaluation


def train_supervised(
    net: BlockNet, images: np.ndarray, labels: dict[str, np.ndarray], config: AmalgamConfig
) -> list[tuple[int, float]]:
    """Cross-entropy training over all of the net's heads; returns per-epoch
    mean loss. Used to fit source (teacher) nets on their labeled partitions."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or tuple(images.shape[1:]) != net.spec.input_shape:
        raise ShapeError(f"images must be [N, {net.spec.input_shape}], got {images.shape}")
    missing = sorted(net.task_set - set(labels))
    if missing:
        raise CoverageError(f"labels missing for task(s) {missing}")
    n = images.shape[0]
    for task in sorted(net.task_set):
        if np.asarray(labels[task]).shape != (n,):
            raise ShapeError(f"labels for {task!r} must have shape ({n},)")
    if config.epochs == 0:
        return []
    if n == 0:
        raise SizeError("cannot train on an empty labeled set")

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 303]))
    opt = SGD({k: v for k, v in net.params.items()}, lr=config.lr, momentum=config.momentum)
    tasks = sorted(net.task_set)
    history: list[tuple[int, float]] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            tape = Tape()
            with tape:
                feats = B.forward(net, Tensor(images[idx]))
                loss: Tensor | None = None
                for task in tasks:
                    ce = T.cross_entropy(feats.logits[task], np.asarray(labels[task])[idx])
                    loss = ce if loss is None else T.add(loss, ce)
                loss = T.scale(loss, 1.0 / len(tasks))
                T.backward(loss, tape)
            losses.append(loss.item())
            opt.step()
        history.append((epoch, float(np.mean(losses))))
    return history


def _unpack_labeled(test) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    if isinstance(test, tuple):
        images, labels = test
    else:
        images, labels = test.images, test.labels
    return np.asarray(images, dtype=np.float64), labels


def evaluate(net: BlockNet, test, tasks: Iterable[str] | None = None, chunk: int = 256) -> dict[str, float]:
    """Top-1 accuracy per task; argmax ties resolve to the lowest class index."""
    images, labels = _unpack_labeled(test)
    score_tasks = sorted(net.task_set) if tasks is None else sorted(set(tasks))
    for task in score_tasks:
        if task not in net.task_set:
            raise CoverageError(f"net has no head for task {task!r}")
        if task not in labels:
            raise CoverageError(f"test set has no labels for task {task!r}")
    if images.ndim != 4 or tuple(images.shape[1:]) != net.spec.input_shape:
        raise ShapeError(f"images must be [N, {net.spec.input_shape}], got {images.shape}")
    hits = {task: 0 for task in score_tasks}
    n = images.shape[0]
    for start in range(0, n, chunk):
        feats = B.forward(net, Tensor(images[start : start + chunk]))
        for task in score_tasks:
            pred = np.argmax(feats.logits[task].data, axis=1)
            hits[task] += int(np.sum(pred == np.asarray(labels[task])[start : start + chunk]))
    return {task: hits[task] / n for task in score_tasks}


# ---------------------------------------------------------------------------
# orchestration


def cluster_sources(
    pool: Sequence[tuple[Any, Iterable[str]]], user_tasks: Iterable[str]
) -> dict[str, list]:
    """Group sources by user task: every source whose task set intersects the
    task joins that task's cluster; multi-task sources may appear in several."""
    tasks = sorted(set(user_tasks))
    if not tasks:
        raise CoverageError("no user tasks given")
    clusters: dict[str, list] = {}
    for task in tasks:
        members = [ref for ref, ts in pool if task in set(ts)]
        if not members:
            raise CoverageError(f"no source covers task {task!r}")
        clusters[task] = members
    return clusters


def _class_count(nets: Sequence[BlockNet], task: str) -> int:
    counts = {net.spec.head_for(task).num_classes for net in nets}
    if len(counts) != 1:
        raise SpecError(f"sources disagree on class count for task {task!r}: {sorted(counts)}")
    return counts.pop()


@dataclass
class DualStageResult:
    components: dict[str, BlockNet]
    target: BlockNet
    stage1_history: dict[str, LossBreakdown]
    stage2_history: LossBreakdown


def stage_one(
    pool: Sequence[BlockNet],
    user_tasks: Iterable[str],
    unlabeled: np.ndarray,
    config: AmalgamConfig,
) -> tuple[dict[str, BlockNet], dict[str, LossBreakdown]]:
    """One single-task component net per user task, amalgamated from the
    sources covering that task."""
    tasks = sorted(set(user_tasks))
    clusters = cluster_sources([(net, net.task_set) for net in pool], tasks)
    ref = pool[0].spec
    components: dict[str, BlockNet] = {}
    stage1: dict[str, LossBreakdown] = {}
    for idx, task in enumerate(tasks):
        cluster = clusters[task]
        comp_spec = BlockNetSpec(
            input_shape=ref.input_shape,
            stem_channels=ref.stem_channels,
            block_channels=ref.block_channels,
            block_strides=ref.block_strides,
            heads=(HeadSpec(task, _class_count(cluster, task)),),
        )
        comp = B.build_blocknet(comp_spec, derive_seed(config.seed, 11, idx))
        comp_cfg = replace(config, seed=derive_seed(config.seed, 12, idx))
        _, history = train_amalgamate(cluster, comp, unlabeled, comp_cfg)
        components[task] = comp
        stage1[task] = history
    return components, stage1


def stage_two(
    components: Sequence[BlockNet],
    unlabeled: np.ndarray,
    config: AmalgamConfig,
) -> tuple[BlockNet, LossBreakdown]:
    """Widened multi-task target amalgamated from (usually single-task)
    component nets; covers the union of the components' tasks."""
    comps = list(components)
    tasks = sorted({task for comp in comps for task in comp.task_set})
    target = build_target_net(comps, tasks, config)
    stage2_cfg = replace(config, seed=derive_seed(config.seed, 14))
    _, history = train_amalgamate(comps, target, unlabeled, stage2_cfg)
    return target, history


def dual_stage(
    pool: Sequence[BlockNet],
    user_tasks: Iterable[str],
    unlabeled: np.ndarray,
    config: AmalgamConfig,
) -> DualStageResult:
    """Stage 1: one single-task component net per user task, amalgamated from
    the sources covering it. Stage 2: a widened multi-task target amalgamated
    from the components."""
    components, stage1 = stage_one(pool, user_tasks, unlabeled, config)
    target, stage2 = stage_two(list(components.values()), unlabeled, config)
    return DualStageResult(components, target, stage1, stage2)


def build_target_net(
    pool: Sequence[BlockNet], tasks: Sequence[str], config: AmalgamConfig
) -> BlockNet:
    """Widened multi-task net: component widths times the widen factor."""
    ref = pool[0].spec
    clusters = cluster_sources([(net, net.task_set) for net in pool], tasks)
    heads = tuple(HeadSpec(task, _class_count(clusters[task], task)) for task in sorted(tasks))
    spec = B.widen_spec(ref, config.widen_factor, heads=heads)
    return B.build_blocknet(spec, derive_seed(config.seed, 13))


def one_shot_amalgamate(
    pool: Sequence[BlockNet],
    user_tasks: Iterable[str],
    unlabeled: np.ndarray,
    config: AmalgamConfig,
) -> tuple[BlockNet, LossBreakdown]:
    """Single-stage baseline: the widened target learns from all covering
    sources at once, selecting per task head among the sources covering it."""
    tasks = sorted(set(user_tasks))
    clusters = cluster_sources([(net, net.task_set) for net in pool], tasks)
    selected: list[BlockNet] = []
    for net in pool:
        if any(net in members for members in clusters.values()) and net not in selected:
            selected.append(net)
    target = build_target_net(pool, tasks, config)
    cfg = replace(config, per_task_selection=True, seed=derive_seed(config.seed, 16))
    _, history = train_amalgamate(selected, target, unlabeled, cfg)
    return target, history


def epoch_summaries(history: LossBreakdown) -> list[dict[str, float]]:
    """Per-epoch means of the loss parts, for metrics reporting."""
    by_epoch: dict[int, list[StepRecord]] = {}
    for rec in history.steps:
        by_epoch.setdefault(rec.epoch, []).append(rec)
    out = []
    for epoch in sorted(by_epoch):
        recs = by_epoch[epoch]
        out.append(
            {
                "epoch": epoch,
                "loss_total": float(np.mean([r.l_total for r in recs])),
                "loss_soft": float(np.mean([r.l_soft for r in recs])),
                "loss_transfer": float(np.mean([sum(r.l_a) for r in recs])),
                "loss_reg": float(np.mean([sum(r.l_reg) for r in recs])),
            }
        )
    return out
