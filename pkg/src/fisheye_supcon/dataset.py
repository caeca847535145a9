"""Annotation ingestion and object-patch extraction.

Each image comes with a text file holding one object per line in the
normalized detector convention ``class_id x_center y_center width height``.
Every object is cropped into its own patch and labeled with both its
semantic class and a distortion class derived from where its center sits.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ExtractionError, ParseError, ValidationError
from .geometry import (
    NormalizedPoint,
    RegionScheme,
    assign_distortion_level,
    parse_scheme,
    radial_distance,
    scheme_name,
)

log = logging.getLogger(__name__)

DEFAULT_PATCH_SIZE = (32, 32)

POOL_MAGIC = b"FEPP"
POOL_VERSION = 1
_POOL_HEADER = struct.Struct("<4sIIHHBBB")
_POOL_RECORD_HEAD = struct.Struct("<BBf")


@dataclass(frozen=True)
class ObjectAnnotation:
    class_id: int
    center: NormalizedPoint
    width: float
    height: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError(f"class_id must be non-negative, got {self.class_id}")
        if not (0.0 < self.width <= 1.0 and 0.0 < self.height <= 1.0):
            raise ValidationError(f"box size ({self.width}, {self.height}) must lie in (0, 1]")

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def distance(self) -> float:
        return radial_distance(self.center)


def parse_annotation_file(text: str, source: Optional[str] = None) -> list[ObjectAnnotation]:
    """Parse an annotation file body into annotations, in file order.

    Raises ``ParseError`` naming the line for malformed lines and
    ``ValidationError`` for well-formed lines with out-of-range values.
    """
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise ParseError(f"expected 5 fields, got {len(fields)}", line=lineno, source=source)
        try:
            cls_value = float(fields[0])
            x, y, w, h = (float(v) for v in fields[1:])
        except ValueError:
            raise ParseError(f"non-numeric field in {line.strip()!r}", line=lineno, source=source) from None
        if not cls_value.is_integer():
            raise ParseError(f"class id {fields[0]!r} is not an integer", line=lineno, source=source)
        try:
            out.append(ObjectAnnotation(int(cls_value), NormalizedPoint(x, y), w, h))
        except ValidationError as exc:
            where = f"{source}:" if source else ""
            raise ValidationError(f"{where}line {lineno}: {exc}") from None
    return out


def format_annotations(annotations: Sequence[ObjectAnnotation], digits: Optional[int] = None) -> str:
    """Serialize annotations to the line format.

    With ``digits=None`` floats use their shortest round-tripping repr, so
    ``parse_annotation_file(format_annotations(a)) == a``.
    """
    def fmt(v):
        return repr(float(v)) if digits is None else f"{v:.{digits}f}"

    lines = [
        f"{a.class_id} {fmt(a.center.x)} {fmt(a.center.y)} {fmt(a.width)} {fmt(a.height)}"
        for a in annotations
    ]
    return "".join(line + "\n" for line in lines)


def clamp_box(ann: ObjectAnnotation) -> tuple[float, float, float, float]:
    """Box edges ``(left, top, right, bottom)`` clamped to the unit square."""
    hw, hh = ann.width / 2.0, ann.height / 2.0
    left = min(max(ann.center.x - hw, 0.0), 1.0)
    right = min(max(ann.center.x + hw, 0.0), 1.0)
    top = min(max(ann.center.y - hh, 0.0), 1.0)
    bottom = min(max(ann.center.y + hh, 0.0), 1.0)
    return left, top, right, bottom


def _as_hwc(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ExtractionError(f"expected a nonempty H x W (x C) image, got shape {image.shape}")
    return image


def resample_region(image, top, left, bottom, right, out_size) -> np.ndarray:
    """Bilinearly resample the pixel-space region to ``out_size``.

    Edges are continuous pixel coordinates (0 to W along x). Sample points
    sit at output pixel centers, so a full-frame region at native size is
    an exact copy and a 2x reduction averages each 2x2 block. Samples past
    the border take the nearest edge pixel.
    """
    image = _as_hwc(image)
    oh, ow = out_size
    ys = top + (np.arange(oh) + 0.5) * ((bottom - top) / oh) - 0.5
    xs = left + (np.arange(ow) + 0.5) * ((right - left) / ow) - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((oh, ow, image.shape[2]))
    for c in range(image.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(image[:, :, c], [grid_y, grid_x], order=1, mode="nearest")
    return out


def extract_patch(image, ann: ObjectAnnotation, out_size=DEFAULT_PATCH_SIZE) -> np.ndarray:
    """Crop ``ann``'s clamped box out of ``image`` and resample it.

    Returns an ``out_size + (channels,)`` array with values in [0, 1].
    """
    image = _as_hwc(image)
    height, width = image.shape[:2]
    left, top, right, bottom = clamp_box(ann)
    if (right - left) * width <= 0 or (bottom - top) * height <= 0:
        raise ExtractionError(f"box for class {ann.class_id} at ({ann.center.x}, {ann.center.y}) has zero area after clamping")
    patch = resample_region(image, top * height, left * width, bottom * height, right * width, out_size)
    return np.clip(patch, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class LabeledPatch:
    """An object patch with its semantic and distortion labels."""

    pixels: np.ndarray
    semantic_class: int
    distortion_level: int
    distortion_class: int
    source_distance: float
    num_levels: int = 2

    def __post_init__(self):
        if not 0 <= self.distortion_level < self.num_levels:
            raise ValidationError(f"distortion level {self.distortion_level} outside [0, {self.num_levels})")
        if self.distortion_class != self.semantic_class * self.num_levels + self.distortion_level:
            raise ValidationError("distortion_class must equal semantic_class * L + distortion_level")


def derive_distortion_class(ann: ObjectAnnotation, scheme: RegionScheme, num_classes: int) -> tuple[int, int]:
    """Return ``(distortion_level, distortion_class)`` for one object."""
    if ann.class_id >= num_classes:
        raise ValidationError(f"class_id {ann.class_id} >= number of classes {num_classes}")
    level = assign_distortion_level(scheme, ann.center)
    return level, ann.class_id * scheme.num_levels + level


def label_patch(pixels, ann: ObjectAnnotation, scheme: RegionScheme, num_classes: int) -> LabeledPatch:
    level, dclass = derive_distortion_class(ann, scheme, num_classes)
    return LabeledPatch(
        pixels=np.asarray(pixels, dtype=np.float32),
        semantic_class=ann.class_id,
        distortion_level=level,
        distortion_class=dclass,
        source_distance=float(np.float32(ann.distance)),
        num_levels=scheme.num_levels,
    )


# ---------------------------------------------------------------- manifest


@dataclass
class DatasetManifest:
    """Class names plus (image, annotation) file pairs.

    Relative paths resolve against ``root`` (the manifest's directory).
    """

    class_names: list[str]
    items: list[tuple[str, str]] = field(default_factory=list)
    scheme: Optional[str] = None
    root: Path = Path(".")

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ValidationError("a manifest needs at least 2 classes")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def check_files(self) -> None:
        for image, ann in self.items:
            for p in (self.resolve(image), self.resolve(ann)):
                if not p.is_file():
                    raise ValidationError(f"manifest references missing file {p}")

    def to_json(self) -> str:
        doc = {
            "class_names": list(self.class_names),
            "scheme": self.scheme,
            "items": [{"image": str(i), "annotations": str(a)} for i, a in self.items],
        }
        return json.dumps(doc, indent=2) + "\n"


def load_manifest(path, check=True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, source=str(path)) from None
    try:
        items = [(it["image"], it["annotations"]) for it in doc.get("items", [])]
        manifest = DatasetManifest(list(doc["class_names"]), items, doc.get("scheme"), path.parent)
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed manifest: {exc}", source=str(path)) from None
    if check:
        manifest.check_files()
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(manifest.to_json(), encoding="utf-8")


def load_image(path) -> np.ndarray:
    """Load ``.npy`` arrays directly; other formats go through Pillow as
    grayscale scaled to [0, 1]."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def read_manifest_annotations(manifest: DatasetManifest) -> list[list[ObjectAnnotation]]:
    """Parsed annotations per manifest item, in manifest order."""
    out = []
    for _, ann_path in manifest.items:
        p = manifest.resolve(ann_path)
        out.append(parse_annotation_file(p.read_text(encoding="utf-8"), source=str(p)))
    return out


def _worker_count(requested: Optional[int]) -> int:
    cap = os.environ.get("FEYE_THREADS")
    n = requested if requested is not None else (os.cpu_count() or 1)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def build_patch_pool(manifest: DatasetManifest, scheme: RegionScheme, out_size=DEFAULT_PATCH_SIZE,
                     workers: Optional[int] = None) -> list[LabeledPatch]:
    """Extract and label every annotated object in manifest order."""

    def one(item):
        image_rel, ann_rel = item
        ann_path = manifest.resolve(ann_rel)
        anns = parse_annotation_file(ann_path.read_text(encoding="utf-8"), source=str(ann_path))
        if not anns:
            return []
        image_path = manifest.resolve(image_rel)
        image = load_image(image_path)
        patches = []
        for k, ann in enumerate(anns):
            try:
                pixels = extract_patch(image, ann, out_size)
                patches.append(label_patch(pixels, ann, scheme, manifest.num_classes))
            except (ExtractionError, ValidationError) as exc:
                raise type(exc)(f"{ann_path}: object {k + 1}: {exc}") from None
        return patches

    n = _worker_count(workers)
    if n == 1 or len(manifest.items) < 2:
        chunks = [one(item) for item in manifest.items]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            chunks = list(pool.map(one, manifest.items))
    result = [p for chunk in chunks for p in chunk]
    log.info("extracted %d patches from %d images (%s)", len(result), len(manifest.items), scheme_name(scheme))
    return result


# ---------------------------------------------------------------- pool file


@dataclass
class PatchPool:
    patches: list[LabeledPatch]
    num_classes: int
    num_levels: int

    def __len__(self):
        return len(self.patches)

    @property
    def patch_shape(self) -> tuple[int, int, int]:
        return tuple(self.patches[0].pixels.shape) if self.patches else (0, 0, 0)

    def arrays(self):
        """Stacked ``(pixels, semantic, distortion_class, level)`` arrays."""
        x = np.stack([p.pixels for p in self.patches]).astype(np.float64)
        sem = np.array([p.semantic_class for p in self.patches], dtype=np.int64)
        dc = np.array([p.distortion_class for p in self.patches], dtype=np.int64)
        lvl = np.array([p.distortion_level for p in self.patches], dtype=np.int64)
        return x, sem, dc, lvl


def write_pool(path, patches: Sequence[LabeledPatch], num_classes: int, num_levels: int) -> None:
    """Write patches in the ``FEPP`` binary layout (little-endian).

    Header: magic, version u32, count u32, h u16, w u16, ch u8, C u8, L u8.
    Record: semantic u8, level u8, distance f32, then h*w*ch f32 pixels.
    """
    if not (2 <= num_classes <= 255 and 1 <= num_levels <= 255):
        raise ValidationError("pool files hold 2..255 classes and 1..255 levels")
    if patches:
        h, w, ch = patches[0].pixels.shape
    else:
        h = w = ch = 0
    buf = bytearray(_POOL_HEADER.pack(POOL_MAGIC, POOL_VERSION, len(patches), h, w, ch, num_classes, num_levels))
    for p in patches:
        if p.pixels.shape != (h, w, ch):
            raise ValidationError("all patches in a pool must share one shape")
        if p.semantic_class >= num_classes or p.num_levels != num_levels:
            raise ValidationError("patch labels do not match pool class/level counts")
        buf += _POOL_RECORD_HEAD.pack(p.semantic_class, p.distortion_level, p.source_distance)
        buf += np.ascontiguousarray(p.pixels, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_pool(path) -> PatchPool:
    data = Path(path).read_bytes()
    if len(data) < _POOL_HEADER.size:
        raise ParseError("truncated pool header", source=str(path))
    magic, version, count, h, w, ch, num_classes, num_levels = _POOL_HEADER.unpack_from(data, 0)
    if magic != POOL_MAGIC:
        raise ParseError(f"bad magic {magic!r}", source=str(path))
    if version != POOL_VERSION:
        raise ParseError(f"unsupported pool version {version}", source=str(path))
    npix = h * w * ch
    rec = _POOL_RECORD_HEAD.size + 4 * npix
    if len(data) != _POOL_HEADER.size + count * rec:
        raise ParseError(f"pool size mismatch: expected {count} records", source=str(path))
    patches = []
    off = _POOL_HEADER.size
    for _ in range(count):
        sem, lvl, dist = _POOL_RECORD_HEAD.unpack_from(data, off)
        pix = np.frombuffer(data, dtype="<f4", count=npix, offset=off + _POOL_RECORD_HEAD.size)
        patches.append(LabeledPatch(
            pixels=pix.reshape(h, w, ch).astype(np.float32),
            semantic_class=sem,
            distortion_level=lvl,
            distortion_class=sem * num_levels + lvl,
            source_distance=dist,
            num_levels=num_levels,
        ))
        off += rec
    return PatchPool(patches, num_classes, num_levels)


def scheme_from_manifest(manifest: DatasetManifest, default: str = "standard") -> RegionScheme:
    return parse_scheme(manifest.scheme or default)
