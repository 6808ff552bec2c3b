"""Residual block-structured nets with per-task classifier heads.

A net is a 3x3 stem followed by L residual blocks (y = relu(conv3x3(relu(
conv3x3(x))) + shortcut(x)), shortcut being identity or a strided 1x1 conv
when channels or stride change), global average pooling, and one linear head
per task. No batch norm, no pooling layers, no dropout.

Spatial sizes are strict: every conv must produce an exact integer output
size, so stride-2 stages require odd incoming sizes. The desk default is
17x17x3 input, stem 8, blocks (8, 16, 32) with strides (1, 2, 2), leaving 5x5
final maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import GeometryError, ShapeError, SpecError
from .tensor import Tensor

DEFAULT_INPUT_SHAPE = (3, 17, 17)
DEFAULT_STEM_CHANNELS = 8
DEFAULT_BLOCK_CHANNELS = (8, 16, 32)
DEFAULT_BLOCK_STRIDES = (1, 2, 2)
DEFAULT_WIDEN_FACTOR = 1.5


@dataclass(frozen=True)
class HeadSpec:
    task_id: str
    num_classes: int


@dataclass(frozen=True)
class BlockNetSpec:
    input_shape: tuple[int, int, int]
    stem_channels: int
    block_channels: tuple[int, ...]
    block_strides: tuple[int, ...]
    heads: tuple[HeadSpec, ...]

    def __post_init__(self):
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise SpecError(f"input_shape must be (C, H, W) of positive ints, got {self.input_shape}")
        if self.stem_channels < 1:
            raise SpecError(f"stem_channels must be positive, got {self.stem_channels}")
        if len(self.block_channels) < 2:
            raise SpecError(f"need at least 2 blocks, got {len(self.block_channels)}")
        if len(self.block_channels) != len(self.block_strides):
            raise SpecError("block_channels and block_strides must have equal length")
        if any(c < 1 for c in self.block_channels):
            raise SpecError(f"block channels must be positive, got {self.block_channels}")
        if any(s not in (1, 2) for s in self.block_strides):
            raise SpecError(f"block strides must be 1 or 2, got {self.block_strides}")
        if not self.heads:
            raise SpecError("a net needs at least one head")
        tasks = [h.task_id for h in self.heads]
        if len(set(tasks)) != len(tasks):
            raise SpecError(f"duplicate head task ids in {tasks}")
        if any(h.num_classes < 2 for h in self.heads):
            raise SpecError("every head needs at least 2 classes")
        self.spatial_schedule()  # raises GeometryError on a bad stride plan

    @property
    def num_blocks(self) -> int:
        return len(self.block_channels)

    @property
    def task_set(self) -> frozenset[str]:
        return frozenset(h.task_id for h in self.heads)

    def head_for(self, task_id: str) -> HeadSpec:
        for h in self.heads:
            if h.task_id == task_id:
                return h
        raise SpecError(f"no head for task {task_id!r}")

    def spatial_schedule(self) -> tuple[tuple[int, int], ...]:
        """(H, W) after the stem and after each block; strict integer geometry."""

        def shrink(size: int, stride: int, where: str) -> int:
            # k=3 pad=1 for block convs and k=1 pad=0 for shortcuts both give
            # (size - 1)/stride + 1, so one check covers the whole block
            if (size - 1) % stride:
                raise GeometryError(
                    f"{where}: spatial size {size} is not stride-{stride} compatible"
                )
            out = (size - 1) // stride + 1
            if out < 1:
                raise GeometryError(f"{where}: empty feature map")
            return out

        _, h, w = self.input_shape
        schedule = []
        for i, stride in enumerate(self.block_strides):
            h = shrink(h, stride, f"block{i}")
            w = shrink(w, stride, f"block{i}")
            schedule.append((h, w))
        return tuple(schedule)


def default_spec(heads: dict[str, int] | tuple[HeadSpec, ...]) -> BlockNetSpec:
    if isinstance(heads, dict):
        heads = tuple(HeadSpec(t, c) for t, c in sorted(heads.items()))
    return BlockNetSpec(
        input_shape=DEFAULT_INPUT_SHAPE,
        stem_channels=DEFAULT_STEM_CHANNELS,
        block_channels=DEFAULT_BLOCK_CHANNELS,
        block_strides=DEFAULT_BLOCK_STRIDES,
        heads=tuple(heads),
    )


def widen_spec(spec: BlockNetSpec, factor: float, heads=None) -> BlockNetSpec:
    """Scale stem and block widths by ``factor`` (rounded up)."""
    if not factor > 0:
        raise SpecError(f"widen factor must be positive, got {factor}")
    return replace(
        spec,
        stem_channels=math.ceil(spec.stem_channels * factor),
        block_channels=tuple(math.ceil(c * factor) for c in spec.block_channels),
        heads=spec.heads if heads is None else tuple(heads),
    )


@dataclass
class BlockFeatures:
    """Per-block post-activation maps plus per-task logits."""

    maps: list[Tensor]
    logits: dict[str, Tensor]


@dataclass
class Resources:
    params: int
    flops_per_image: int
    per_layer: tuple[tuple[str, int, int], ...] = field(default=())  # (name, params, macs)


class BlockNet:
    def __init__(self, spec: BlockNetSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params

    @property
    def task_set(self) -> frozenset[str]:
        return self.spec.task_set

    def __repr__(self) -> str:
        tasks = ",".join(sorted(self.task_set))
        return f"BlockNet(blocks={self.spec.block_channels}, tasks=[{tasks}])"


def _param_shapes(spec: BlockNetSpec) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    c_in = spec.input_shape[0]
    shapes.append(("stem.w", (spec.stem_channels, c_in, 3, 3)))
    prev = spec.stem_channels
    for i, (ch, stride) in enumerate(zip(spec.block_channels, spec.block_strides)):
        shapes.append((f"block{i}.conv1.w", (ch, prev, 3, 3)))
        shapes.append((f"block{i}.conv2.w", (ch, ch, 3, 3)))
        if prev != ch or stride != 1:
            shapes.append((f"block{i}.shortcut.w", (ch, prev, 1, 1)))
        prev = ch
    for head in spec.heads:
        shapes.append((f"head.{head.task_id}.w", (prev, head.num_classes)))
        shapes.append((f"head.{head.task_id}.b", (head.num_classes,)))
    return shapes


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_blocknet(spec: BlockNetSpec, seed: int) -> BlockNet:
    """Seeded construction; same spec and seed give bitwise-identical params."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(spec):
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            data = he_uniform(rng, shape, fan_in)
        else:  # head weight [D, classes]
            data = he_uniform(rng, shape, shape[0])
        params[name] = T.parameter(data)
    return BlockNet(spec, params)


def forward(net: BlockNet, x: Tensor) -> BlockFeatures:
    """Run the net; returns every block's post-activation map and head logits."""
    spec = net.spec
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(
            f"input must be [N, {spec.input_shape[0]}, {spec.input_shape[1]}, "
            f"{spec.input_shape[2]}], got {x.shape}"
        )
    p = net.params
    h = T.relu(T.conv2d(x, p["stem.w"], stride=1, padding=1))
    maps: list[Tensor] = []
    for i, stride in enumerate(spec.block_strides):
        inner = T.relu(T.conv2d(h, p[f"block{i}.conv1.w"], stride=stride, padding=1))
        inner = T.conv2d(inner, p[f"block{i}.conv2.w"], stride=1, padding=1)
        key = f"block{i}.shortcut.w"
        shortcut = T.conv2d(h, p[key], stride=stride, padding=0) if key in p else h
        h = T.relu(T.add(inner, shortcut))
        maps.append(h)
    pooled = T.reduce("mean", h, axes=(2, 3))
    logits = {
        head.task_id: T.linear(pooled, p[f"head.{head.task_id}.w"], p[f"head.{head.task_id}.b"])
        for head in spec.heads
    }
    return BlockFeatures(maps=maps, logits=logits)


def count_resources(net: BlockNet) -> Resources:
    """Closed-form parameter and FLOP counts; flops = 2 * multiply-accumulates."""
    spec = net.spec
    _, h, w = spec.input_shape
    layers: list[tuple[str, int, int]] = []

    def conv_entry(name: str, c_out: int, c_in: int, k: int, oh: int, ow: int) -> None:
        layers.append((name, c_out * c_in * k * k, c_out * oh * ow * c_in * k * k))

    conv_entry("stem.w", spec.stem_channels, spec.input_shape[0], 3, h, w)
    prev = spec.stem_channels
    for i, ((oh, ow), ch, stride) in enumerate(
        zip(spec.spatial_schedule(), spec.block_channels, spec.block_strides)
    ):
        conv_entry(f"block{i}.conv1.w", ch, prev, 3, oh, ow)
        conv_entry(f"block{i}.conv2.w", ch, ch, 3, oh, ow)
        if prev != ch or stride != 1:
            conv_entry(f"block{i}.shortcut.w", ch, prev, 1, oh, ow)
        prev = ch
    for head in spec.heads:
        layers.append(
            (f"head.{head.task_id}", prev * head.num_classes + head.num_classes, prev * head.num_classes)
        )
    params = sum(p for _, p, _ in layers)
    macs = sum(m for _, _, m in layers)
    return Resources(params=params, flops_per_image=2 * macs, per_layer=tuple(layers))
