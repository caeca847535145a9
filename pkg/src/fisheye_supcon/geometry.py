"""Fisheye radial geometry: distances, the distortion polynomial and the
mapping from an object position to a discrete distortion level."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ParseError, ValidationError

#: Largest radius used for binning; slightly above sqrt(0.5) so corners fall
#: inside the last bin.
MAX_DISTANCE = 0.7072
IMAGE_CENTER = (0.5, 0.5)


@dataclass(frozen=True)
class FisheyeCalibration:
    """Coefficients of ``d(rho) = a0 + a2 rho^2 + a3 rho^3 + a4 rho^4``.

    There is no linear term.
    """

    a0: float = 0.0
    a2: float = 0.6
    a3: float = 0.25
    a4: float = 0.1

    def __post_init__(self):
        for name in ("a0", "a2", "a3", "a4"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValidationError(f"calibration coefficient {name} must be finite, got {value}")
        with np.errstate(over="ignore", invalid="ignore"):
            edge = distortion_at(self, np.linspace(0.0, MAX_DISTANCE, 33))
        if not np.all(np.isfinite(edge)):
            raise ValidationError("distortion polynomial overflows on [0, 0.7072]")

    def as_dict(self) -> dict:
        return {"a0": self.a0, "a2": self.a2, "a3": self.a3, "a4": self.a4}



@dataclass(frozen=True)
class NormalizedPoint:
    """A position in image-fraction coordinates, both axes in [0, 1]."""

    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValidationError(f"point ({self.x}, {self.y}) is outside the unit square")


@dataclass(frozen=True)
class BoxScheme:
    """Center/edge split: centers inside the closed box are level 0."""

    top_left: NormalizedPoint
    bottom_right: NormalizedPoint

    def __post_init__(self):
        if not (self.top_left.x < self.bottom_right.x and self.top_left.y < self.bottom_right.y):
            raise ValidationError("box top_left must be strictly above and left of bottom_right")

    @property
    def num_levels(self) -> int:
        return 2

    def describe(self) -> str:
        tl, br = self.top_left, self.bottom_right
        return f"box({tl.x},{tl.y})-({br.x},{br.y})"


@dataclass(frozen=True)
class RadialLevels:
    """``l`` uniform radial bins over ``[0, max_distance]``."""

    l: int
    max_distance: float = MAX_DISTANCE

    def __post_init__(self):
        if int(self.l) != self.l or self.l < 1:
            raise ValidationError(f"number of radial levels must be a positive integer, got {self.l}")
        if not self.max_distance > 0:
            raise ValidationError("max_distance must be positive")

    @property
    def num_levels(self) -> int:
        return int(self.l)

    def describe(self) -> str:
        return f"levels:{self.l}"


RegionScheme = Union[BoxScheme, RadialLevels]


def _box(x0, y0, x1, y1) -> BoxScheme:
    return BoxScheme(NormalizedPoint(x0, y0), NormalizedPoint(x1, y1))


def region_boundary_presets() -> dict[str, BoxScheme]:
    """The three center/edge boundary boxes used in the box-size ablation."""
    return {
        "standard": _box(0.25, 0.25, 0.75, 0.75),
        "large": _box(0.1, 0.1, 0.9, 0.9),
        "small": _box(0.33, 0.33, 0.66, 0.66),
    }


def parse_scheme(text: str) -> RegionScheme:
    """Parse ``standard``, ``large``, ``small`` or ``levels:<l>``."""
    text = text.strip()
    presets = region_boundary_presets()
    if text in presets:
        return presets[text]
    if text.startswith("levels:"):
        try:
            l = int(text.split(":", 1)[1])
        except ValueError:
            raise ValidationError(f"bad level count in scheme {text!r}") from None
        return RadialLevels(l)
    raise ValidationError(f"unknown region scheme {text!r} (expected standard, large, small or levels:<l>)")


def scheme_name(scheme: RegionScheme) -> str:
    for name, box in region_boundary_presets().items():
        if box == scheme:
            return name
    if isinstance(scheme, RadialLevels) and scheme.max_distance == MAX_DISTANCE:
        return f"levels:{scheme.l}"
    return scheme.describe()


def radial_distance(p: NormalizedPoint) -> float:
    """Euclidean distance from the image center (0.5, 0.5)."""
    return math.hypot(p.x - IMAGE_CENTER[0], p.y - IMAGE_CENTER[1])


def distortion_at(cal: FisheyeCalibration, rho):
    """Evaluate the distortion polynomial at ``rho`` (scalar or array)."""
    rho2 = rho * rho
    return cal.a0 + cal.a2 * rho2 + cal.a3 * rho2 * rho + cal.a4 * rho2 * rho2


DEFAULT_CALIBRATION = FisheyeCalibration()


def assign_distortion_level(scheme: RegionScheme, center: NormalizedPoint) -> int:
    if isinstance(scheme, BoxScheme):
        tl, br = scheme.top_left, scheme.bottom_right
        inside = tl.x <= center.x <= br.x and tl.y <= center.y <= br.y
        return 0 if inside else 1
    if isinstance(scheme, RadialLevels):
        width = scheme.max_distance / scheme.l
        level = math.floor(radial_distance(center) / width)
        return min(max(level, 0), scheme.l - 1)
    raise TypeError(f"unsupported region scheme {scheme!r}")


def distortion_curve(cal: FisheyeCalibration, samples: int = 100, max_distance: float = MAX_DISTANCE):
    """``samples`` evenly spaced radii on [0, max_distance] and d at each."""
    if samples < 2:
        raise ValidationError("need at least 2 samples for a distortion curve")
    rho = np.linspace(0.0, max_distance, samples)
    return rho, distortion_at(cal, rho)


def load_calibration(path) -> FisheyeCalibration:
    """Read a calibration file.

    Accepts JSON (``{"a0": ..., ...}``) or one ``key = value`` (or
    ``key: value``) pair per line; ``#`` starts a comment.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), line=exc.lineno, source=str(path)) from None
    else:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            for sep in ("=", ":"):
                if sep in line:
                    key, value = line.split(sep, 1)
                    break
            else:
                parts = line.split()
                if len(parts) != 2:
                    raise ParseError(f"expected 'key = value', got {line!r}", line=lineno, source=str(path))
                key, value = parts
            raw[key.strip()] = value.strip()
    unknown = set(raw) - {"a0", "a2", "a3", "a4"}
    if unknown:
        raise ParseError(f"unknown calibration keys: {sorted(unknown)}", source=str(path))
    missing = {"a0", "a2", "a3", "a4"} - set(raw)
    if missing:
        raise ParseError(f"missing calibration keys: {sorted(missing)}", source=str(path))
    try:
        coeffs = {k: float(v) for k, v in raw.items()}
    except (TypeError, ValueError) as exc:
        raise ParseError(f"non-numeric coefficient: {exc}", source=str(path)) from None
    return FisheyeCalibration(**coeffs)


def save_calibration(cal: FisheyeCalibration, path) -> None:
    lines = [f"{k} = {v!r}" for k, v in cal.as_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
