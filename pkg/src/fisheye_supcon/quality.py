"""Naturalness features and dataset statistics.

The naturalness features follow the BRISQUE construction: mean-subtracted
contrast-normalized (MSCN) coefficients, a generalized Gaussian fit to them,
and asymmetric generalized Gaussian fits to products of neighbouring
coefficients along four orientations, at two scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, ndimage
from scipy.special import gamma as gamma_fn
from scipy.stats import norm

from .dataset import LabeledPatch, ObjectAnnotation
from .errors import ValidationError
from .geometry import FisheyeCalibration, RegionScheme, assign_distortion_level, distortion_curve

KERNEL_SIZE = 7
KERNEL_SIGMA = 7.0 / 6.0
MIN_MSCN_SIZE = 16
MIN_FEATURE_SIZE = 32
NUM_FEATURES = 36

# moment-ratio lookup tables for the shape-parameter grid search
_SHAPE_GRID = np.round(np.arange(0.2, 10.0 + 5e-4, 0.001), 3)
_GGD_RATIO = gamma_fn(1.0 / _SHAPE_GRID) * gamma_fn(3.0 / _SHAPE_GRID) / gamma_fn(2.0 / _SHAPE_GRID) ** 2
_AGGD_RATIO = gamma_fn(2.0 / _SHAPE_GRID) ** 2 / (gamma_fn(1.0 / _SHAPE_GRID) * gamma_fn(3.0 / _SHAPE_GRID))

# neighbour offsets (dy, dx): horizontal, vertical, main and anti diagonal
_ORIENTATIONS = ((0, 1), (1, 0), (1, 1), (1, -1))


def gaussian_kernel_1d(size: int = KERNEL_SIZE, sigma: float = KERNEL_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def mscn_map(image, c: float = 1.0) -> np.ndarray:
    """MSCN coefficients ``(I - mu) / (sigma + c)``.

    ``mu`` and ``sigma`` are local Gaussian-weighted mean and standard
    deviation (7x7, sigma 7/6, reflected borders). The stabilizer ``c = 1``
    assumes an 8-bit-like intensity range.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValidationError(f"mscn_map expects a 2-D grayscale image, got shape {image.shape}")
    if min(image.shape) < MIN_MSCN_SIZE:
        raise ValidationError(f"image must be at least {MIN_MSCN_SIZE}x{MIN_MSCN_SIZE}, got {image.shape}")
    k = gaussian_kernel_1d()

    def blur(a):
        return ndimage.correlate1d(ndimage.correlate1d(a, k, axis=0, mode="reflect"), k, axis=1, mode="reflect")

    mu = blur(image)
    var = np.abs(blur(image * image) - mu * mu)
    return (image - mu) / (np.sqrt(var) + c)


def ggd_fit(samples) -> tuple[float, float]:
    """Moment-matched zero-mean generalized Gaussian: ``(shape, variance)``."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    sigma_sq = float(np.mean(x * x))
    e_abs = float(np.mean(np.abs(x)))
    if e_abs == 0.0:
        raise ValidationError("cannot fit a generalized Gaussian to all-zero samples (zero variance)")
    rho = sigma_sq / e_abs ** 2
    shape = float(_SHAPE_GRID[np.argmin(np.abs(rho - _GGD_RATIO))])
    return shape, sigma_sq


def aggd_fit(samples) -> tuple[float, float, float, float]:
    """Moment-matched asymmetric generalized Gaussian.

    Returns ``(shape, left_sigma, right_sigma, mean)``.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 32:
        raise ValidationError(f"aggd_fit needs at least 32 samples, got {x.size}")
    if np.all(x == x[0]):
        raise ValidationError("cannot fit an AGGD to identical samples (zero variance)")
    neg, pos = x[x < 0], x[x > 0]
    left = math.sqrt(float(np.mean(neg * neg))) if neg.size else 0.0
    right = math.sqrt(float(np.mean(pos * pos))) if pos.size else 0.0
    r_hat = float(np.mean(np.abs(x))) ** 2 / float(np.mean(x * x))
    if left > 0 and right > 0:
        g = left / right
        r_norm = r_hat * (g ** 3 + 1) * (g + 1) / (g ** 2 + 1) ** 2
    else:
        r_norm = r_hat  # limit of the correction as the ratio goes to 0 or infinity
    idx = int(np.argmin((_AGGD_RATIO - r_norm) ** 2))
    shape = float(_SHAPE_GRID[idx])
    scale = math.sqrt(gamma_fn(1.0 / shape) / gamma_fn(3.0 / shape))
    mean = (right - left) * scale * gamma_fn(2.0 / shape) / gamma_fn(1.0 / shape)
    return shape, left, right, float(mean)


def _pair_products(m: np.ndarray):
    # products m[y, x] * m[y + dy, x + dx] over the valid overlap (dy >= 0)
    h, w = m.shape
    for dy, dx in _ORIENTATIONS:
        a = m[0:h - dy, max(0, -dx):w - max(0, dx)]
        b = m[dy:h, max(0, dx):w - max(0, -dx)]
        yield a * b


def _scale_features(image: np.ndarray) -> list[float]:
    m = mscn_map(image)
    shape, var = ggd_fit(m)
    feats = [shape, var]
    for prod in _pair_products(m):
        a, left, right, mean = aggd_fit(prod)
        feats.extend([a, mean, left ** 2, right ** 2])
    return feats


def downsample2(image: np.ndarray) -> np.ndarray:
    """2x box-filter reduction (odd trailing row/column dropped)."""
    h, w = image.shape
    h2, w2 = h // 2, w // 2
    return image[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


@dataclass(frozen=True, eq=False)
class NaturalnessFeatures:
    """36 naturalness features: per scale, the MSCN shape and variance
    followed by (shape, mean, left variance, right variance) for each of the
    four neighbour orientations."""

    values: np.ndarray

    def mean(self) -> float:
        return float(np.mean(self.values))


def brisque_features(image) -> NaturalnessFeatures:
    """Compute the 36 features of a grayscale image in 8-bit-like range."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim != 2:
        raise ValidationError(f"brisque_features expects a grayscale image, got shape {image.shape}")
    if min(image.shape) < MIN_FEATURE_SIZE:
        raise ValidationError(f"image must be at least {MIN_FEATURE_SIZE}x{MIN_FEATURE_SIZE}, got {image.shape}")
    feats = _scale_features(image) + _scale_features(downsample2(image))
    return NaturalnessFeatures(np.asarray(feats, dtype=np.float64))


# ---------------------------------------------------------------- Gaussians


@dataclass(frozen=True)
class GaussianSummary:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std >= 0:
            raise ValidationError("std must be non-negative")

    @classmethod
    def of(cls, values) -> "GaussianSummary":
        v = np.asarray(values, dtype=np.float64)
        return cls(float(v.mean()), float(v.std()))


def _pdf_crossings(g1: GaussianSummary, g2: GaussianSummary) -> list[float]:
    """Points where the two densities are equal."""
    m1, s1, m2, s2 = g1.mean, g1.std, g2.mean, g2.std
    if s1 == s2:
        return [] if m1 == m2 else [(m1 + m2) / 2.0]
    a = 1.0 / (2 * s1 ** 2) - 1.0 / (2 * s2 ** 2)
    b = m2 / s2 ** 2 - m1 / s1 ** 2
    c = m1 ** 2 / (2 * s1 ** 2) - m2 ** 2 / (2 * s2 ** 2) - math.log(s2 / s1)
    disc = b * b - 4 * a * c
    if disc < 0:
        return []
    r = math.sqrt(disc)
    return sorted([(-b - r) / (2 * a), (-b + r) / (2 * a)])


def gaussian_overlap(g1: GaussianSummary, g2: GaussianSummary) -> float:
    """Overlap coefficient: the integral of ``min(pdf1, pdf2)``.

    Integrated adaptively over the union of both +-8 sigma ranges, split at
    the density crossings.
    """
    if g1.std <= 0 or g2.std <= 0:
        raise ValidationError("gaussian_overlap requires positive standard deviations")
    lo = min(g1.mean - 8 * g1.std, g2.mean - 8 * g2.std)
    hi = max(g1.mean + 8 * g1.std, g2.mean + 8 * g2.std)
    breaks = [lo] + [x for x in _pdf_crossings(g1, g2) if lo < x < hi] + [hi]

    def integrand(x):
        return min(norm.pdf(x, g1.mean, g1.std), norm.pdf(x, g2.mean, g2.std))

    total = 0.0
    for a, b in zip(breaks[:-1], breaks[1:]):
        # each piece is a single Gaussian tail or body; hint the peaks
        pts = [p for p in (g1.mean, g2.mean) if a < p < b]
        val, _ = integrate.quad(integrand, a, b, points=pts or None, epsabs=1e-11, epsrel=1e-10, limit=200)
        total += val
    return float(min(max(total, 0.0), 1.0))


# ---------------------------------------------------------------- reports


@dataclass
class PoolReport:
    """Descriptive statistics of an annotated object pool."""

    class_names: list[str]
    counts: np.ndarray            # (C, L) objects per class and level
    distances: np.ndarray         # per object
    areas: np.ndarray             # per object, width * height
    classes: np.ndarray           # per object
    area_bin_edges: np.ndarray    # 21 edges
    area_histogram: np.ndarray    # (C, 20)
    curve_rho: np.ndarray
    curve_d: np.ndarray

    def center_edge(self) -> dict[str, dict[str, int]]:
        return {
            name: {"center": int(self.counts[c, 0]), "edge": int(self.counts[c, 1:].sum())}
            for c, name in enumerate(self.class_names)
        }

    def center_fraction(self) -> float:
        return float(self.counts[:, 0].sum() / self.counts.sum())


def pool_statistics(annotations: Sequence[ObjectAnnotation], scheme: RegionScheme,
                    calibration: FisheyeCalibration, class_names: Sequence[str],
                    area_bins: int = 20, curve_samples: int = 100) -> PoolReport:
    """Center/edge counts, distance/area pairs, area histogram and the
    distortion curve for a set of object annotations."""
    if not annotations:
        raise ValidationError("pool_statistics needs at least one object")
    nc = len(class_names)
    counts = np.zeros((nc, scheme.num_levels), dtype=np.int64)
    for a in annotations:
        if a.class_id >= nc:
            raise ValidationError(f"class_id {a.class_id} >= number of classes {nc}")
        counts[a.class_id, assign_distortion_level(scheme, a.center)] += 1
    distances = np.array([a.distance for a in annotations])
    areas = np.array([a.area for a in annotations])
    classes = np.array([a.class_id for a in annotations], dtype=np.int64)
    top = float(areas.max())
    edges = np.linspace(0.0, top if top > 0 else 1.0, area_bins + 1)
    hist = np.stack([np.histogram(areas[classes == c], bins=edges)[0] for c in range(nc)])
    rho, d = distortion_curve(calibration, curve_samples)
    return PoolReport(list(class_names), counts, distances, areas, classes, edges, hist, rho, d)


@dataclass
class RegionFeatureSummary:
    class_id: int
    center: Optional[GaussianSummary]
    edge: Optional[GaussianSummary]
    overlap: Optional[float]
    center_count: int
    edge_count: int


def patch_feature_means(patches: Sequence[LabeledPatch], workers: Optional[int] = None,
                        dynamic_range: float = 255.0) -> np.ndarray:
    """Mean of the 36 naturalness features for each patch.

    Patch pixels in [0, 1] are scaled by ``dynamic_range`` first.
    """
    def one(p):
        return brisque_features(np.asarray(p.pixels, dtype=np.float64)[:, :, 0] * dynamic_range).mean()

    if workers and workers > 1 and len(patches) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as ex:
            return np.array(list(ex.map(one, patches)))
    return np.array([one(p) for p in patches])


def region_feature_summaries(patches: Sequence[LabeledPatch], num_classes: int,
                             workers: Optional[int] = None) -> list[RegionFeatureSummary]:
    """Per class, a Gaussian over the mean naturalness feature for center
    (level 0) and edge (level > 0) patches, and their overlap."""
    scores = patch_feature_means(patches, workers)
    sem = np.array([p.semantic_class for p in patches])
    lvl = np.array([p.distortion_level for p in patches])
    out = []
    for c in range(num_classes):
        cen = scores[(sem == c) & (lvl == 0)]
        edg = scores[(sem == c) & (lvl > 0)]
        gc = GaussianSummary.of(cen) if cen.size else None
        ge = GaussianSummary.of(edg) if edg.size else None
        ov = None
        if gc is not None and ge is not None and gc.std > 0 and ge.std > 0:
            ov = gaussian_overlap(gc, ge)
        out.append(RegionFeatureSummary(c, gc, ge, ov, int(cen.size), int(edg.size)))
    return out
