"""Synthetic scenes: box layouts and feature pyramids that encode them.

Each scene samples a Poisson-distributed number of ground-truth boxes,
classed small / medium / large by their longer side (thresholds 0.1 and
0.3 of the image). Rendering paints an anisotropic Gaussian bump per box
onto the pyramid level matching its class (small on P3, medium on P4,
large on P5) with a half-amplitude echo on the adjacent levels, so small
objects are essentially invisible to the fixed P5 stage and probing has
something real to find. Channel 0 carries presence; channels 1 and 2
carry the bump scaled by a log-size code, so box regression cannot be
read off presence alone. Everything is deterministic per seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box, iou
from .pyramid import FeatureMap, FeaturePyramid
from .rng import SplitMix, derive_seed
from .tensorio import read_tensors, write_tensors

SIZE_SMALL = "small"
SIZE_MEDIUM = "medium"
SIZE_LARGE = "large"
SIZE_THRESHOLDS = (0.1, 0.3)  # on max(w, h)
LEVEL_OF_CLASS = {SIZE_SMALL: 3, SIZE_MEDIUM: 4, SIZE_LARGE: 5}


def classify_size(box: Box) -> str:
    d = box.max_dim
    if d < SIZE_THRESHOLDS[0]:
        return SIZE_SMALL
    if d < SIZE_THRESHOLDS[1]:
        return SIZE_MEDIUM
    return SIZE_LARGE


@dataclass
class SynthConfig:
    """Scene statistics and rendering knobs."""

    image_size: int = 512
    channels: int = 16
    mean_gt: float = 5.0
    class_mix: tuple[float, float, float] = (0.45, 0.35, 0.20)  # small, medium, large
    # Floor of 0.05 keeps the smallest bumps ~3 cells wide on their base
    # level (the desk-scale analog of ~32 px objects on a stride-8 map).
    small_range: tuple[float, float] = (0.05, 0.1)
    medium_range: tuple[float, float] = (0.1, 0.3)
    large_range: tuple[float, float] = (0.3, 0.6)
    aspect_range: tuple[float, float] = (0.5, 2.0)
    amplitude: float = 2.0
    echo: float = 0.5
    noise_sigma: float = 0.005
    iou_cap: float = 0.3
    max_attempts: int = 1000

    def __post_init__(self):
        if self.image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        if self.channels < 3:
            raise ValueError(f"need at least 3 channels for the signal code, got {self.channels}")
        if self.mean_gt < 0:
            raise ValueError(f"mean_gt must be >= 0, got {self.mean_gt}")
        if abs(sum(self.class_mix) - 1.0) > 1e-9:
            raise ValueError(f"class_mix must sum to 1, got {self.class_mix}")

    def level_dims(self, level: int) -> int:
        return self.image_size >> level


@dataclass
class SceneSpec:
    """Sampled layout: everything needed to re-render the pyramid."""

    scene_id: int
    seed: int
    boxes: list[Box]
    size_classes: list[str]
    noise: float
    truncated: bool = False  # placement gave up before reaching the drawn count

    @property
    def difficulty(self) -> int:
        return len(self.boxes)


@dataclass
class Scene:
    spec: SceneSpec
    pyramid: FeaturePyramid


def poisson(gen: SplitMix, lam: float) -> int:
    """Knuth's product method; consumes a variable number of uniforms."""
    if lam <= 0.0:
        return 0
    limit = math.exp(-lam)
    k = 0
    p = 1.0
    while True:
        p *= gen.uniform()
        if p <= limit:
            return k
        k += 1


def gen_scene(scene_id: int, seed: int, cfg: SynthConfig) -> SceneSpec:
    """Sample one layout: GT count ~ Poisson(mean_gt), rejection placement.

    Boxes are kept inside the unit square with pairwise IoU at most
    ``iou_cap``; after ``max_attempts`` total draws the scene is returned
    short and flagged truncated.
    """
    gen = SplitMix(derive_seed(seed, "layout"))
    n = poisson(gen, cfg.mean_gt)
    ranges = {SIZE_SMALL: cfg.small_range, SIZE_MEDIUM: cfg.medium_range, SIZE_LARGE: cfg.large_range}
    cum = (cfg.class_mix[0], cfg.class_mix[0] + cfg.class_mix[1])
    boxes: list[Box] = []
    classes: list[str] = []
    attempts = 0
    truncated = False
    while len(boxes) < n:
        attempts += 1
        if attempts > cfg.max_attempts:
            truncated = True
            break
        u = gen.uniform()
        cls = SIZE_SMALL if u < cum[0] else SIZE_MEDIUM if u < cum[1] else SIZE_LARGE
        lo, hi = ranges[cls]
        d = lo + gen.uniform() * (hi - lo)
        la, lb = math.log(cfg.aspect_range[0]), math.log(cfg.aspect_range[1])
        aspect = math.exp(la + gen.uniform() * (lb - la))
        w = d * min(1.0, aspect)
        h = d * min(1.0, 1.0 / aspect)
        cx = w / 2 + gen.uniform() * (1.0 - w)
        cy = h / 2 + gen.uniform() * (1.0 - h)
        box = Box(cx, cy, w, h)
        if all(iou(box, other) <= cfg.iou_cap for other in boxes):
            boxes.append(box)
            classes.append(cls)
    return SceneSpec(
        scene_id=scene_id,
        seed=seed,
        boxes=boxes,
        size_classes=classes,
        noise=cfg.noise_sigma,
        truncated=truncated,
    )


def _size_code(dim: float) -> float:
    # Injective in dim; order-one magnitude over the sampled size ranges.
    return 1.0 + 0.5 * math.log(dim)


# Bump width as a fraction of box size. Home level gets a tight peak so a
# box lights up roughly one predictor tile (wide bumps leave half-lit
# neighbor tiles that stall at mid scores); the echo is broader so the
# smallest boxes stay above the noise floor one level up, where cell pitch
# halves.
HOME_SIGMA_DIV = 6.0
ECHO_SIGMA_DIV = 2.5


def _paint(plane: dict[str, np.ndarray], box: Box, amp: float, sigma_div: float) -> None:
    h, w = plane["ch0"].shape
    u = (np.arange(w, dtype=np.float64) + 0.5) / w
    v = (np.arange(h, dtype=np.float64) + 0.5) / h
    sx = box.w / sigma_div
    sy = box.h / sigma_div
    gx = np.exp(-((u - box.cx) ** 2) / (2.0 * sx * sx))
    gy = np.exp(-((v - box.cy) ** 2) / (2.0 * sy * sy))
    bump = amp * np.outer(gy, gx)
    plane["ch0"] += bump
    plane["ch1"] += bump * _size_code(box.w)
    plane["ch2"] += bump * _size_code(box.h)


def render_pyramid(spec: SceneSpec, cfg: SynthConfig) -> FeaturePyramid:
    """Rasterize a layout into levels 3..5.

    Each box paints at its class level at full amplitude and on directly
    adjacent levels at ``echo`` amplitude; remaining channels carry only
    noise. Noise streams derive from the scene seed per level, so the
    result depends on the spec alone.
    """
    levels = {}
    planes = {}
    for level in (3, 4, 5):
        n = cfg.level_dims(level)
        planes[level] = {
            "ch0": np.zeros((n, n), dtype=np.float64),
            "ch1": np.zeros((n, n), dtype=np.float64),
            "ch2": np.zeros((n, n), dtype=np.float64),
        }
    for box, cls in zip(spec.boxes, spec.size_classes):
        base = LEVEL_OF_CLASS[cls]
        for level in (3, 4, 5):
            if level == base:
                _paint(planes[level], box, cfg.amplitude, HOME_SIGMA_DIV)
            elif abs(level - base) == 1:
                _paint(planes[level], box, cfg.amplitude * cfg.echo, ECHO_SIGMA_DIV)
    for level in (3, 4, 5):
        n = cfg.level_dims(level)
        values = np.zeros((cfg.channels, n, n), dtype=np.float64)
        values[0] = planes[level]["ch0"]
        values[1] = planes[level]["ch1"]
        values[2] = planes[level]["ch2"]
        if spec.noise > 0.0:
            gen = SplitMix(derive_seed(spec.seed, "noise", level))
            values += spec.noise * gen.normals(cfg.channels * n * n).reshape(cfg.channels, n, n)
        levels[level] = FeatureMap(level=level, values=values.astype(np.float32))
    return FeaturePyramid(levels)


def make_scene(scene_id: int, seed: int, cfg: SynthConfig) -> Scene:
    spec = gen_scene(scene_id, seed, cfg)
    return Scene(spec=spec, pyramid=render_pyramid(spec, cfg))


def make_dataset(n_scenes: int, seed: int, cfg: SynthConfig) -> list[Scene]:
    """Render ``n_scenes`` scenes with per-scene seeds derived from ``seed``."""
    return [make_scene(i, derive_seed(seed, "scene", i), cfg) for i in range(n_scenes)]


def _spec_record(spec: SceneSpec) -> dict:
    return {
        "id": spec.scene_id,
        "seed": spec.seed,
        "noise": spec.noise,
        "truncated": spec.truncated,
        "boxes": [[b.cx, b.cy, b.w, b.h] for b in spec.boxes],
        "classes": list(spec.size_classes),
    }


def _spec_from_record(rec: dict) -> SceneSpec:
    return SceneSpec(
        scene_id=rec["id"],
        seed=rec["seed"],
        boxes=[Box(*coords) for coords in rec["boxes"]],
        size_classes=list(rec["classes"]),
        noise=rec["noise"],
        truncated=rec["truncated"],
    )


def write_dataset(path, scenes: list[Scene]) -> None:
    """Persist scenes to one tensor container; bit-exact on read-back.

    Raises:
        ValueError: empty scene list.
    """
    if not scenes:
        raise ValueError("refusing to write an empty dataset")
    tensors = {}
    for i, scene in enumerate(scenes):
        for level in sorted(scene.pyramid.levels):
            tensors[f"scene{i:05d}/level{level}"] = scene.pyramid[level].values
    meta = {"kind": "synthetic_dataset", "scenes": [_spec_record(s.spec) for s in scenes]}
    write_tensors(path, tensors, meta)


def read_dataset(path) -> list[Scene]:
    """Inverse of :func:`write_dataset`."""
    tensors, meta = read_tensors(path)
    if meta.get("kind") != "synthetic_dataset":
        raise ValueError(f"{path}: not a dataset file (kind={meta.get('kind')!r})")
    scenes = []
    for i, rec in enumerate(meta["scenes"]):
        spec = _spec_from_record(rec)
        levels = {}
        prefix = f"scene{i:05d}/level"
        for name, arr in tensors.items():
            if name.startswith(prefix):
                level = int(name[len(prefix) :])
                levels[level] = FeatureMap(level=level, values=arr)
        scenes.append(Scene(spec=spec, pyramid=FeaturePyramid(levels)))
    return scenes
