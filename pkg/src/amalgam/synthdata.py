"""Synthetic labeled shape images for desk-scale experiments.

Each sample renders one shape (circle, square, or triangle) with a sampled
fill color and size, jittered around the image center, over a uniform grey
background, plus per-pixel uniform noise. Every label is a deterministic
function of the scene parameters -- never of the rendered pixels -- so labels
can be recomputed exactly from the stored scene table.

Binary attribute rates are calibrated to sit in [0.4, 0.6]; the noise
amplitude is chosen so small nets trained on modest partitions land in the
80-92% test band rather than saturating.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, SizeError, SpecError
from .tensor import Tensor

KIND_CIRCLE, KIND_SQUARE, KIND_TRIANGLE = 0, 1, 2

# label rules (fixed; sampling distributions steer rates, rules never move)
RED_R_MIN = 166  # is_red: R >= this and both G, B <= RED_GB_MAX (8-bit scale)
RED_GB_MAX = 89
SIZE_THRESHOLD = 3.7  # is_large: size strictly greater
BRIGHT_THRESHOLD = 0.5  # bright_background: background strictly greater

TASK_CLASSES = {
    "is_circle": 2,
    "is_red": 2,
    "bright_background": 2,
    "is_large": 2,
    "shape_category": 3,
}

# scene table columns
SCENE_COLUMNS = ("kind", "size", "cx", "cy", "fill_r", "fill_g", "fill_b", "background", "noise")


@dataclass(frozen=True)
class SceneSpec:
    """Sampling distribution for scenes; label rules are module constants."""

    image_hw: tuple[int, int] = (17, 17)
    circle_rate: float = 0.5
    red_rate: float = 0.5
    large_rate: float = 0.5
    small_size: tuple[float, float] = (2.4, 3.3)
    large_size: tuple[float, float] = (4.6, 5.6)
    center_jitter: float = 2.0
    noise_amplitude: float = 0.55
    # share of non-red fills drawn warm (red channel just below the red box);
    # the rest are clearly cool fills
    near_miss_rate: float = 0.5

    def __post_init__(self):
        if self.image_hw[0] < 5 or self.image_hw[1] < 5:
            raise SpecError(f"image too small: {self.image_hw}")
        for rate in (self.circle_rate, self.red_rate, self.large_rate):
            if not 0 < rate < 1:
                raise SpecError(f"rates must lie strictly in (0, 1), got {rate}")
        if not self.small_size[1] < SIZE_THRESHOLD < self.large_size[0]:
            raise SpecError("size ranges must straddle the is_large threshold")
        if self.noise_amplitude < 0:
            raise SpecError(f"noise amplitude must be non-negative, got {self.noise_amplitude}")
        if not 0 <= self.near_miss_rate <= 1:
            raise SpecError(f"near_miss_rate must lie in [0, 1], got {self.near_miss_rate}")


@dataclass
class LabeledDataset:
    """Images in [0,1], int labels per task, and the generating scene table."""

    images: np.ndarray  # [N, 3, H, W] float64
    labels: dict[str, np.ndarray]  # task -> int64 [N]
    scenes: np.ndarray | None  # [N, len(SCENE_COLUMNS)] float64
    task_classes: dict[str, int] = field(default_factory=lambda: dict(TASK_CLASSES))

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> tuple[Tensor, dict[str, int]]:
        return Tensor(self.images[i]), {t: int(y[i]) for t, y in self.labels.items()}

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            images=self.images[idx],
            labels={t: y[idx] for t, y in self.labels.items()},
            scenes=None if self.scenes is None else self.scenes[idx],
            task_classes=dict(self.task_classes),
        )


def labels_from_scenes(scenes: np.ndarray) -> dict[str, np.ndarray]:
    """Recompute every label from scene parameters alone."""
    s = np.asarray(scenes, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != len(SCENE_COLUMNS):
        raise ShapeError(f"scene table must be [N, {len(SCENE_COLUMNS)}], got {s.shape}")
    kind = s[:, 0].astype(np.int64)
    size = s[:, 1]
    red = (s[:, 4] >= RED_R_MIN) & (s[:, 5] <= RED_GB_MAX) & (s[:, 6] <= RED_GB_MAX)
    return {
        "is_circle": (kind == KIND_CIRCLE).astype(np.int64),
        "is_red": red.astype(np.int64),
        "bright_background": (s[:, 7] > BRIGHT_THRESHOLD).astype(np.int64),
        "is_large": (size > SIZE_THRESHOLD).astype(np.int64),
        "shape_category": kind,
    }


def _sample_scene(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_hw
    if rng.random() < spec.circle_rate:
        kind = KIND_CIRCLE
    else:
        kind = KIND_SQUARE if rng.random() < 0.5 else KIND_TRIANGLE
    lo, hi = spec.large_size if rng.random() < spec.large_rate else spec.small_size
    size = rng.uniform(lo, hi)
    cy = (h - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
    cx = (w - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
    if rng.random() < spec.red_rate:
        fill = (
            float(rng.integers(RED_R_MIN, 227)),
            float(rng.integers(0, RED_GB_MAX + 1)),
            float(rng.integers(0, RED_GB_MAX + 1)),
        )
    elif rng.random() < spec.near_miss_rate:
        # near-miss red: warm fill whose red channel stops short of the box
        fill = (
            float(rng.integers(96, RED_R_MIN)),
            float(rng.integers(0, RED_GB_MAX + 1)),
            float(rng.integers(0, RED_GB_MAX + 1)),
        )
    else:
        # clearly outside the red box: dim red channel, lively green/blue
        fill = (
            float(rng.integers(0, RED_R_MIN - 30)),
            float(rng.integers(RED_GB_MAX + 31, 256)),
            float(rng.integers(RED_GB_MAX + 31, 256)),
        )
    background = rng.uniform(0.0, 1.0)
    return np.array(
        [kind, size, cx, cy, fill[0], fill[1], fill[2], background, spec.noise_amplitude]
    )


def _shape_mask(scene: np.ndarray, h: int, w: int) -> np.ndarray:
    kind = int(scene[0])
    size, cx, cy = scene[1], scene[2], scene[3]
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == KIND_CIRCLE:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= size**2
    if kind == KIND_SQUARE:
        half = 0.8 * size
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= half
    top, bottom = cy - size, cy + 0.75 * size
    inside_rows = (yy >= top) & (yy <= bottom)
    return inside_rows & (np.abs(xx - cx) <= 0.75 * (yy - top))


def render_scene(scene: np.ndarray, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """One [3, H, W] image in [0, 1]; the rng supplies only the pixel noise."""
    h, w = spec.image_hw
    img = np.full((3, h, w), scene[7])
    mask = _shape_mask(scene, h, w)
    for c in range(3):
        img[c][mask] = scene[4 + c] / 255.0
    amp = scene[8]
    if amp > 0:
        img += rng.uniform(-amp, amp, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(spec: SceneSpec, n: int, seed: int) -> LabeledDataset:
    """Deterministic generation; sample i depends only on (seed, i)."""
    if n < 1:
        raise SizeError(f"need at least one sample, got n={n}")
    h, w = spec.image_hw
    images = np.empty((n, 3, h, w))
    scenes = np.empty((n, len(SCENE_COLUMNS)))
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        scene = _sample_scene(spec, rng)
        scenes[i] = scene
        images[i] = render_scene(scene, spec, rng)
    return LabeledDataset(images=images, labels=labels_from_scenes(scenes), scenes=scenes)


@dataclass
class DatasetSplit:
    """Disjoint per-teacher labeled partitions, an unlabeled transfer set
    (images only), and a held-out labeled test set."""

    teacher_parts: list[LabeledDataset]
    unlabeled: np.ndarray
    test: LabeledDataset
    assignment: np.ndarray  # per sample: 0..T-1, -1 unlabeled, -2 test


UNLABELED_TAG = -1
TEST_TAG = -2


def split(
    dataset: LabeledDataset,
    n_teachers: int,
    unlabeled_fraction: float,
    test_fraction: float,
    seed: int,
) -> DatasetSplit:
    """Seeded disjoint split; teacher partitions are equal sized within one."""
    n = len(dataset)
    if n_teachers < 1:
        raise SizeError(f"need at least one teacher partition, got {n_teachers}")
    if not (0 < unlabeled_fraction < 1 and 0 < test_fraction < 1):
        raise SizeError("fractions must lie strictly in (0, 1)")
    n_unlabeled = int(round(n * unlabeled_fraction))
    n_test = int(round(n * test_fraction))
    n_teach = n - n_unlabeled - n_test
    if n_unlabeled < 1 or n_test < 1 or n_teach < n_teachers:
        raise SizeError(
            f"split of {n} into unlabeled={n_unlabeled}, test={n_test}, "
            f"teachers={n_teach} over {n_teachers} parts is infeasible"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    perm = rng.permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    pos = 0
    parts = []
    base, extra = divmod(n_teach, n_teachers)
    for t in range(n_teachers):
        size = base + (1 if t < extra else 0)
        idx = np.sort(perm[pos : pos + size])
        assignment[idx] = t
        parts.append(dataset.subset(idx))
        pos += size
    idx_unlabeled = np.sort(perm[pos : pos + n_unlabeled])
    assignment[idx_unlabeled] = UNLABELED_TAG
    pos += n_unlabeled
    idx_test = np.sort(perm[pos:])
    assignment[idx_test] = TEST_TAG
    return DatasetSplit(
        teacher_parts=parts,
        unlabeled=dataset.images[idx_unlabeled].copy(),
        test=dataset.subset(idx_test),
        assignment=assignment,
    )
