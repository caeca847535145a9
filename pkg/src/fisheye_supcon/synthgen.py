"""Synthetic fisheye object data.

Objects of five shape classes are scattered uniformly over the frame. Each
object's appearance is warped according to its radial position: the shape
is rotated to follow the polar angle and squeezed along the tangential axis
by ``1 / (1 + d(rho))``. Distortion therefore depends on position by
construction, which gives the semantic/distortion interaction something to
find.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import (
    DatasetManifest,
    LabeledPatch,
    ObjectAnnotation,
    format_annotations,
    label_patch,
    save_manifest,
    write_pool,
)
from .errors import ValidationError
from .geometry import (
    DEFAULT_CALIBRATION,
    FisheyeCalibration,
    NormalizedPoint,
    assign_distortion_level,
    distortion_at,
    parse_scheme,
)
from .rng import substream

log = logging.getLogger(__name__)

CLASS_NAMES = ("disc", "square", "triangle", "cross", "ring")
NUM_CLASSES = len(CLASS_NAMES)

FOREGROUND = 0.8
BACKGROUND = 0.2
_SUPERSAMPLE = 4
_COORD_DIGITS = 6


@dataclass
class GeneratorConfig:
    seed: int = 0
    num_images: int = 300
    objects_per_image: tuple[int, int] = (5, 10)
    size_range: tuple[float, float] = (0.05, 0.2)
    calibration: FisheyeCalibration = DEFAULT_CALIBRATION
    noise_std: float = 0.05
    class_weights: tuple[float, ...] = (1.0,) * NUM_CLASSES
    scheme: str = "standard"
    patch_size: int = 32
    image_size: int = 128
    center_only: bool = False
    jitter: float = 1.0

    def __post_init__(self):
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        if self.num_images < 0:
            raise ValidationError("num_images must be non-negative")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValidationError("objects_per_image must be an ordered non-negative range")
        smin, smax = self.size_range
        if not 0.0 < smin <= smax <= 0.5:
            raise ValidationError("size_range must lie within (0, 0.5]")
        if not self.noise_std >= 0:
            raise ValidationError("noise_std must be non-negative")
        if len(self.class_weights) != NUM_CLASSES or min(self.class_weights) < 0 or sum(self.class_weights) <= 0:
            raise ValidationError(f"class_weights needs {NUM_CLASSES} non-negative entries with positive sum")
        if self.patch_size < 8 or self.image_size < 8:
            raise ValidationError("patch_size and image_size must be at least 8 pixels")
        if not 0.0 <= self.jitter <= 1.0:
            raise ValidationError("jitter must lie in [0, 1]")
        parse_scheme(self.scheme)

    @property
    def region_scheme(self):
        return parse_scheme(self.scheme)

    @classmethod
    def from_dict(cls, raw: dict) -> "GeneratorConfig":
        raw = dict(raw)
        if "calibration" in raw and isinstance(raw["calibration"], dict):
            raw["calibration"] = FisheyeCalibration(**raw["calibration"])
        for key in ("objects_per_image", "size_range", "class_weights"):
            if key in raw:
                raw[key] = tuple(raw[key])
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["calibration"] = self.calibration.as_dict()
        return d


# ---------------------------------------------------------------- shapes


def _shape_mask(class_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership of points ``(u, v)`` in shape ``class_id``.

    Coordinates span [-1, 1] across the patch, ``v`` pointing down.
    """
    r2 = u * u + v * v
    if class_id == 0:  # disc
        return r2 <= 0.7 ** 2
    if class_id == 1:  # square
        return np.maximum(np.abs(u), np.abs(v)) <= 0.6
    if class_id == 2:  # upward equilateral triangle, circumradius 0.75
        h = 0.75
        half = h * math.sqrt(3) / 2
        base = h / 2
        inside_base = v <= base
        # the two slanted sides meet at (0, -h)
        slope = half / (base + h)
        return inside_base & (np.abs(u) <= (v + h) * slope)
    if class_id == 3:  # plus-shaped cross
        a, b = np.abs(u), np.abs(v)
        return ((a <= 0.2) & (b <= 0.7)) | ((b <= 0.2) & (a <= 0.7))
    if class_id == 4:  # ring
        return (r2 >= 0.4 ** 2) & (r2 <= 0.7 ** 2)
    raise ValidationError(f"class_id must be in [0, {NUM_CLASSES - 1}], got {class_id}")


def warp_scale(cal: FisheyeCalibration, rho: float) -> float:
    """Tangential compression factor at radius ``rho``."""
    return 1.0 / (1.0 + float(distortion_at(cal, rho)))


def shape_coverage(class_id: int, rho: float, size, cal: FisheyeCalibration, angle: float = 0.0,
                   scale: float = 1.0, offset: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Anti-aliased (supersampled) coverage of the warped shape, in [0, 1].

    ``scale`` and ``offset`` place the shape within the patch before the
    radial warp is applied about the shape's own center.
    """
    if isinstance(size, (int, np.integer)):
        size = (int(size), int(size))
    h, w = size
    s = warp_scale(cal, rho)
    if not s > 0:
        raise ValidationError(f"distortion at rho={rho} gives non-positive scale {s}")
    n = _SUPERSAMPLE
    ys = (np.arange(h * n) + 0.5) / (h * n) * 2.0 - 1.0 - offset[1]
    xs = (np.arange(w * n) + 0.5) / (w * n) * 2.0 - 1.0 - offset[0]
    px, py = np.meshgrid(xs, ys)
    # forward map is R(angle) @ diag(1, s); pull back each pixel through it
    c, sn = math.cos(angle), math.sin(angle)
    u = (c * px + sn * py) / scale
    v = (-sn * px + c * py) / (s * scale)
    mask = _shape_mask(class_id, u, v).astype(np.float64)
    return mask.reshape(h, n, w, n).mean(axis=(1, 3))


def _clutter(shape, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    """Smooth random background: a few low-frequency plane waves."""
    h, w = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    field_ = np.zeros(shape)
    for _ in range(3):
        fy, fx = rng.uniform(-3.0, 3.0, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        field_ += np.cos(2 * math.pi * (fy * yy + fx * xx) + phase)
    return amplitude * field_ / 3.0


def render_patch(class_id: int, rho: float, size, cal: FisheyeCalibration, noise_std: float,
                 rng: np.random.Generator, angle: float = 0.0, jitter: float = 0.0) -> np.ndarray:
    """Render one warped object patch as an ``(h, w, 1)`` array in [0, 1].

    ``angle`` is the polar angle of the object's position about the image
    center. ``jitter`` in [0, 1] scales per-object nuisance variation
    (shape scale and offset, contrast, polarity, background clutter); at 0
    the shape is drawn canonically as light-on-dark.
    """
    if not 0 <= class_id < NUM_CLASSES:
        raise ValidationError(f"class_id must be in [0, {NUM_CLASSES - 1}], got {class_id}")
    if not 0.0 <= rho <= 0.7072:
        raise ValidationError(f"rho must lie in [0, 0.7072], got {rho}")
    if not 0.0 <= jitter <= 1.0:
        raise ValidationError(f"jitter must lie in [0, 1], got {jitter}")
    if isinstance(size, (int, np.integer)):
        size = (int(size), int(size))
    if jitter > 0:
        scale = 1.0 + jitter * rng.uniform(-0.3, 0.15)
        offset = tuple(jitter * rng.uniform(-0.2, 0.2, size=2))
        bg = 0.5 + jitter * rng.uniform(-0.3, 0.0)
        contrast = 0.6 - jitter * rng.uniform(0.0, 0.4)
        polarity = -1.0 if rng.random() < 0.5 * jitter else 1.0
    else:
        scale, offset, bg, contrast, polarity = 1.0, (0.0, 0.0), BACKGROUND, FOREGROUND - BACKGROUND, 1.0
    cover = shape_coverage(class_id, rho, size, cal, angle, scale, offset)
    if polarity < 0:
        bg = 1.0 - bg
    img = bg + polarity * contrast * cover
    if jitter > 0:
        img = img + _clutter(size, rng, 0.15 * jitter)
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)[:, :, None]


# ---------------------------------------------------------------- scenes


@dataclass
class PlacementTally:
    """Per-(class, level) object counts recorded while sampling."""

    num_classes: int
    num_levels: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_levels), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def center_fraction(self) -> float:
        return float(self.counts[:, 0].sum() / self.total) if self.total else 0.0


def _sample_image_objects(cfg: GeneratorConfig, index: int) -> list[ObjectAnnotation]:
    rng = substream(cfg.seed, "scene", index)
    lo, hi = cfg.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    weights = np.asarray(cfg.class_weights, dtype=np.float64)
    weights = weights / weights.sum()
    smin, smax = cfg.size_range
    out = []
    for _ in range(count):
        cls = int(rng.choice(NUM_CLASSES, p=weights))
        w = round(float(rng.uniform(smin, smax)), _COORD_DIGITS)
        h = round(float(rng.uniform(smin, smax)), _COORD_DIGITS)
        if cfg.center_only:
            x = y = 0.5
        else:
            while True:
                x = round(float(rng.uniform(0.0, 1.0)), _COORD_DIGITS)
                y = round(float(rng.uniform(0.0, 1.0)), _COORD_DIGITS)
                on_x = min(x + w / 2, 1.0) - max(x - w / 2, 0.0)
                on_y = min(y + h / 2, 1.0) - max(y - h / 2, 0.0)
                if on_x * on_y >= 0.5 * w * h:
                    break
        out.append(ObjectAnnotation(cls, NormalizedPoint(x, y), w, h))
    return out


def sample_scenes(cfg: GeneratorConfig) -> tuple[list[list[ObjectAnnotation]], PlacementTally]:
    """Sample object annotations for every image, without touching disk."""
    scheme = cfg.region_scheme
    tally = PlacementTally(NUM_CLASSES, scheme.num_levels)
    scenes = []
    for i in range(cfg.num_images):
        objs = _sample_image_objects(cfg, i)
        for a in objs:
            tally.counts[a.class_id, assign_distortion_level(scheme, a.center)] += 1
        scenes.append(objs)
    return scenes, tally


def object_angle(ann: ObjectAnnotation) -> float:
    return math.atan2(ann.center.y - 0.5, ann.center.x - 0.5)


def render_scene(cfg: GeneratorConfig, objects: list[ObjectAnnotation], index: int) -> np.ndarray:
    """Composite warped objects into a full grayscale frame (max blend)."""
    rng = substream(cfg.seed, "scene-pixels", index)
    n = cfg.image_size
    frame = np.full((n, n), BACKGROUND)
    for a in objects:
        x0 = int(round((a.center.x - a.width / 2) * n))
        y0 = int(round((a.center.y - a.height / 2) * n))
        bw = max(2, int(round(a.width * n)))
        bh = max(2, int(round(a.height * n)))
        cover = shape_coverage(a.class_id, a.distance, (bh, bw), cfg.calibration, object_angle(a))
        obj = BACKGROUND + (FOREGROUND - BACKGROUND) * cover
        ys0, xs0 = max(y0, 0), max(x0, 0)
        ys1, xs1 = min(y0 + bh, n), min(x0 + bw, n)
        if ys1 <= ys0 or xs1 <= xs0:
            continue
        sub = obj[ys0 - y0:ys1 - y0, xs0 - x0:xs1 - x0]
        frame[ys0:ys1, xs0:xs1] = np.maximum(frame[ys0:ys1, xs0:xs1], sub)
    if cfg.noise_std > 0:
        frame = frame + rng.normal(0.0, cfg.noise_std, size=frame.shape)
    return np.clip(frame, 0.0, 1.0).astype(np.float32)


def generate_scene_annotations(cfg: GeneratorConfig, out_dir, render_images: bool = True
                               ) -> tuple[DatasetManifest, PlacementTally]:
    """Write per-image annotation files (and frames) plus ``manifest.json``."""
    out_dir = Path(out_dir)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
    if render_images:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    scenes, tally = sample_scenes(cfg)
    items = []
    for i, objs in enumerate(scenes):
        ann_rel = f"annotations/{i:05d}.txt"
        img_rel = f"images/{i:05d}.npy"
        (out_dir / ann_rel).write_text(format_annotations(objs, digits=_COORD_DIGITS), encoding="utf-8")
        if render_images:
            np.save(out_dir / img_rel, render_scene(cfg, objs, i), allow_pickle=False)
        items.append((img_rel, ann_rel))
    manifest = DatasetManifest(list(CLASS_NAMES), items, cfg.scheme, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    log.info("wrote %d annotation files with %d objects", len(items), tally.total)
    return manifest, tally


def patches_from_scenes(cfg: GeneratorConfig, scenes: list[list[ObjectAnnotation]]) -> list[LabeledPatch]:
    scheme = cfg.region_scheme
    pool = []
    for i, objs in enumerate(scenes):
        rng = substream(cfg.seed, "patch-noise", i)
        for a in objs:
            rho = min(a.distance, 0.7072)
            pixels = render_patch(a.class_id, rho, cfg.patch_size, cfg.calibration, cfg.noise_std, rng,
                                  angle=object_angle(a), jitter=cfg.jitter)
            pool.append(label_patch(pixels, a, scheme, NUM_CLASSES))
    return pool


def generate_patch_pool(cfg: GeneratorConfig, out_path: Optional[str] = None
                        ) -> tuple[list[LabeledPatch], PlacementTally]:
    """Sample scenes and render each object directly as a labeled patch.

    If ``out_path`` is given the pool is also written in the ``FEPP`` format.
    """
    scenes, tally = sample_scenes(cfg)
    pool = patches_from_scenes(cfg, scenes)
    if out_path is not None:
        write_pool(out_path, pool, NUM_CLASSES, cfg.region_scheme.num_levels)
    return pool, tally


def write_tally_csv(tally: PlacementTally, path) -> None:
    lines = ["class_id,class_name,level,count"]
    for c in range(tally.num_classes):
        for lvl in range(tally.num_levels):
            lines.append(f"{c},{CLASS_NAMES[c]},{lvl},{tally.counts[c, lvl]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
