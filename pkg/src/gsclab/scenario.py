"""Procedural shape images and incremental class scenarios.

Every image is a pure function of ``(seed, split, step, index)``.  Classes
are told apart mainly by colour, with shape adding local texture, so a
three-layer 3x3 network can learn them while the old model still makes
mistakes near boundaries and on look-alike colours.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ContractViolation

BACKGROUND = 0
SETTINGS = ("disjoint", "overlapped")
SPLITS = {"train": 0, "test": 1}
SHAPE_KINDS = ("disk", "square", "triangle", "ring", "bar", "cross", "diamond", "ellipse")
# odds of 1, 2, 3 or 4 shapes in an image
SHAPE_COUNT_WEIGHTS = (0.1, 0.3, 0.3, 0.3)
PLACEMENT_RETRIES = 30


@dataclass(frozen=True)
class ClassDef:
    id: int
    shape_kind: str
    color: tuple[float, float, float]
    color_jitter: float = 0.06
    size_range: tuple[float, float] = (0.12, 0.22)

    def __post_init__(self):
        if self.id <= BACKGROUND:
            raise ContractViolation("foreground class ids must be positive")
        if self.shape_kind not in SHAPE_KINDS:
            raise ContractViolation(f"unknown shape kind {self.shape_kind!r}")


DEFAULT_CLASSES = (
    ClassDef(1, "disk", (0.85, 0.20, 0.20)),
    ClassDef(2, "square", (0.20, 0.75, 0.25)),
    ClassDef(3, "triangle", (0.20, 0.30, 0.85)),
    ClassDef(4, "ring", (0.90, 0.85, 0.20)),
    ClassDef(5, "bar", (0.80, 0.25, 0.80)),
    ClassDef(6, "cross", (0.20, 0.80, 0.80)),
    ClassDef(7, "diamond", (0.95, 0.55, 0.15)),
    ClassDef(8, "ellipse", (0.50, 0.20, 0.60)),
)


@dataclass(frozen=True)
class ScenarioSpec:
    groups: tuple[tuple[int, ...], ...]
    setting: str = "disjoint"
    images_per_step: int = 200
    test_images_per_step: int = 50
    image_size: tuple[int, int] = (48, 48)
    seed: int = 0
    classes: tuple[ClassDef, ...] = field(default=DEFAULT_CLASSES, repr=False)

    def __post_init__(self):
        groups = tuple(tuple(int(c) for c in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if self.setting not in SETTINGS:
            raise ContractViolation(f"setting must be one of {SETTINGS}")
        if not groups or any(len(g) == 0 for g in groups):
            raise ContractViolation("every step needs at least one class")
        flat = [c for g in groups for c in g]
        if len(set(flat)) != len(flat):
            raise ContractViolation("class groups overlap")
        known = {c.id for c in self.classes}
        if len(known) != len(self.classes):
            raise ContractViolation("duplicate class ids")
        if BACKGROUND in flat or not set(flat) <= known:
            raise ContractViolation(f"groups {groups} use undefined class ids")
        if self.images_per_step < 1 or self.test_images_per_step < 1:
            raise ContractViolation("image counts must be positive")
        if min(self.image_size) < 8:
            raise ContractViolation("images must be at least 8x8")

    @property
    def n_steps(self) -> int:
        return len(self.groups)

    @property
    def foreground_ids(self) -> tuple[int, ...]:
        return tuple(c for g in self.groups for c in g)

    @property
    def step_boundaries(self) -> list[int]:
        """Head width after each step: 1 + |C^0| + ... + |C^t|."""
        return list(np.cumsum([len(g) for g in self.groups]) + 1)

    def class_def(self, class_id: int) -> ClassDef:
        for c in self.classes:
            if c.id == class_id:
                return c
        raise KeyError(class_id)

    def seen(self, step: int) -> tuple[int, ...]:
        return tuple(c for g in self.groups[:step + 1] for c in g)

    def channel_lut(self) -> np.ndarray:
        """Map class id -> output channel (background 0, then step order)."""
        lut = np.zeros(max(c.id for c in self.classes) + 1, dtype=np.int64)
        for ch, cid in enumerate(self.foreground_ids, start=1):
            lut[cid] = ch
        return lut

    def to_channels(self, labels: np.ndarray) -> np.ndarray:
        return self.channel_lut()[labels]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [list(g) for g in self.groups]
        d["image_size"] = list(self.image_size)
        d["classes"] = [asdict(c) for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        if "classes" in d:
            d["classes"] = tuple(
                ClassDef(c["id"], c["shape_kind"], tuple(c["color"]),
                         c.get("color_jitter", 0.06), tuple(c.get("size_range", (0.12, 0.22))))
                for c in d["classes"])
        d["groups"] = tuple(tuple(g) for g in d["groups"])
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass
class StepDataset:
    """Images of one step.  ``gt_full`` is oracle-only: never train on it."""

    images: np.ndarray
    gt_visible: np.ndarray
    gt_full: np.ndarray
    step: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.images)


# ------------------------------------------------------------ rendering


def _shape_mask(kind: str, cy: float, cx: float, r: float, angle: float,
                yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if kind == "triangle":
        return (v <= 0.5 * r) & (v >= -r + 1.7 * np.abs(u))
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.5 * r) ** 2)
    if kind == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.35 * r)
    if kind == "cross":
        return ((np.abs(u) <= r) & (np.abs(v) <= 0.3 * r)) | ((np.abs(v) <= r) & (np.abs(u) <= 0.3 * r))
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= r
    if kind == "ellipse":
        return (u / r) ** 2 + (v / (0.55 * r)) ** 2 <= 1
    raise ContractViolation(f"unknown shape kind {kind!r}")


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.35, 0.6) + rng.uniform(-0.05, 0.05, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (np.cos(theta) * xx / w + np.sin(theta) * yy / h) - 0.5
    amp = rng.uniform(0.05, 0.15)
    img = base[:, None, None] + amp * ramp[None] + rng.normal(0, 0.05, size=(3, h, w))
    return img


def _pool(spec: ScenarioSpec, step: int, split: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(classes the first object is drawn from, classes any other object may use)."""
    if split == "test":
        seen = spec.seen(step)
        return seen, seen
    current = spec.groups[step]
    if spec.setting == "disjoint":
        return current, spec.seen(step)
    return current, spec.foreground_ids


def generate_image(spec: ScenarioSpec, step: int, index: int, split: str = "train"):
    """Render one image; returns ``(image [3,H,W], gt_full [H,W])``."""
    if not 0 <= step < spec.n_steps:
        raise ContractViolation(f"step {step} outside 0..{spec.n_steps - 1}")
    if split not in SPLITS:
        raise ContractViolation(f"split must be one of {tuple(SPLITS)}")
    rng = np.random.default_rng([spec.seed, SPLITS[split], step, index])
    h, w = spec.image_size
    img = _background(rng, h, w)
    gt = np.zeros((h, w), dtype=np.int64)
    first_pool, pool = _pool(spec, step, split)
    n_shapes = int(rng.choice(len(SHAPE_COUNT_WEIGHTS), p=SHAPE_COUNT_WEIGHTS)) + 1
    chosen = [int(rng.choice(first_pool))]
    chosen += [int(c) for c in rng.choice(pool, size=n_shapes - 1)]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    occupied = np.zeros((h, w), dtype=bool)
    side = min(h, w)
    for cid in chosen:
        cdef = spec.class_def(cid)
        for _ in range(PLACEMENT_RETRIES):
            r = rng.uniform(*cdef.size_range) * side
            cy = rng.uniform(r, h - 1 - r)
            cx = rng.uniform(r, w - 1 - r)
            mask = _shape_mask(cdef.shape_kind, cy, cx, r, rng.uniform(0, np.pi), yy, xx)
            halo = _shape_mask("disk", cy, cx, r + 2, 0.0, yy, xx)
            if mask.any() and not (halo & occupied).any():
                break
        else:
            continue  # no room left: keep the image with fewer shapes
        color = np.asarray(cdef.color) + rng.normal(0, cdef.color_jitter, size=3)
        shading = rng.normal(0, 0.04, size=(3, h, w))
        img[:, mask] = (color[:, None] + shading[:, mask])
        gt[mask] = cid
        occupied |= mask
    return img, gt


def visible_labels(spec: ScenarioSpec, step: int, gt_full: np.ndarray) -> np.ndarray:
    """Keep labels of the current step's classes, everything else -> background."""
    keep = np.isin(gt_full, spec.groups[step])
    return np.where(keep, gt_full, BACKGROUND)


def build_step_dataset(spec: ScenarioSpec, step: int, split: str = "train",
                       n_images: int | None = None, dtype=np.float32) -> StepDataset:
    if n_images is None:
        n_images = spec.images_per_step if split == "train" else spec.test_images_per_step
    h, w = spec.image_size
    images = np.empty((n_images, 3, h, w), dtype=dtype)
    gt_full = np.empty((n_images, h, w), dtype=np.int64)
    for i in range(n_images):
        images[i], gt_full[i] = generate_image(spec, step, i, split)
    if split == "test":
        gt_visible = gt_full.copy()
    else:
        gt_visible = visible_labels(spec, step, gt_full)
    return StepDataset(images, gt_visible, gt_full, step, split)


def permute_classes(spec: ScenarioSpec, order: Sequence[int]) -> ScenarioSpec:
    """Relabel the scenario through the map ``sorted(ids)[i] -> order[i]``.

    Group sizes are preserved; with a ScenarioSpec whose groups list ids in sorted
    order the new groups read ``order`` left to right.
    """
    ids = sorted(spec.foreground_ids)
    order = [int(c) for c in order]
    if sorted(order) != ids:
        raise ContractViolation(f"{order} is not a permutation of {ids}")
    mapping = dict(zip(ids, order))
    return replace(spec, groups=tuple(tuple(mapping[c] for c in g) for g in spec.groups))


# -------------------------------------------------------------- presets

PRESET_GROUPS = {
    "4-1": ((1, 2, 3, 4), (5,)),
    "3-1x3": ((1, 2, 3), (4,), (5,), (6,)),
}

# five class orders for the 5-class scenario: A is the natural order
CLASS_ORDERS = {
    "A": (1, 2, 3, 4, 5),
    "B": (2, 5, 3, 1, 4),
    "C": (4, 1, 5, 2, 3),
    "D": (5, 3, 1, 4, 2),
    "E": (3, 4, 2, 5, 1),
}


def preset_scenario(name: str, setting: str = "disjoint", seed: int = 0, **overrides) -> ScenarioSpec:
    key = name.replace("×", "x")
    if key not in PRESET_GROUPS:
        raise ContractViolation(f"unknown scenario {name!r}; choose from {sorted(PRESET_GROUPS)}")
    return ScenarioSpec(groups=PRESET_GROUPS[key], setting=setting, seed=seed, **overrides)


def dump_scenario(spec: ScenarioSpec, out_dir) -> Path:
    """Write PNG images, PGM visible-label masks and a JSON manifest per step."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for step in range(spec.n_steps):
        ds = build_step_dataset(spec, step)
        step_dir = out / f"step_{step}"
        step_dir.mkdir(exist_ok=True)
        for i in range(len(ds)):
            rgb = np.clip(ds.images[i].transpose(1, 2, 0) * 255 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(rgb).save(step_dir / f"image_{i:04d}.png")
            Image.fromarray(ds.gt_visible[i].astype(np.uint8)).save(step_dir / f"label_{i:04d}.pgm")
    (out / "scenario.json").write_text(json.dumps(spec.to_dict(), indent=2))
    return out
