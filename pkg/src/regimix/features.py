"""Per-pixel physical descriptors driving the regime gate.

Six planes are computed from a cube, in this fixed order:
``curvature, ndvi, ndvi_gradient, emp, dmp, lbp``. The spatial descriptors
(EMP, DMP, LBP) operate on a grayscale base image, the band mean.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .cube_io import Cube

FEATURE_NAMES = ("curvature", "ndvi", "ndvi_gradient", "emp", "dmp", "lbp")
RED_NM = 660.0
NIR_NM = 800.0

# clockwise from top-left, as (row, col) offsets
_LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


@dataclass
class FeatureMatrix:
    """Feature planes ``(K, rows, cols)``; ``mean``/``std`` are set once standardized."""

    planes: np.ndarray
    standardized: bool = False
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float64)
        if self.planes.ndim != 3:
            raise ValueError("feature planes must be (K, rows, cols)")
        if not np.all(np.isfinite(self.planes)):
            raise ValueError("feature planes contain non-finite values")

    @property
    def K(self) -> int:
        return self.planes.shape[0]

    @property
    def rows(self) -> int:
        return self.planes.shape[1]

    @property
    def cols(self) -> int:
        return self.planes.shape[2]

    def pixels(self) -> np.ndarray:
        """``(rows*cols, K)`` row-major pixel matrix."""
        return self.planes.reshape(self.K, -1).T.copy()


def base_image(cube: Cube) -> np.ndarray:
    return np.clip(cube.data, 0.0, 1.0).mean(axis=0)


def spectral_curvature(cube: Cube) -> np.ndarray:
    """Mean absolute second difference along the band axis."""
    if cube.bands < 3:
        raise ValueError("spectral curvature needs at least 3 bands")
    y = np.clip(cube.data, 0.0, 1.0)
    second = y[:-2] - 2.0 * y[1:-1] + y[2:]
    return np.abs(second).mean(axis=0)


def resolve_ndvi_bands(cube: Cube, red_band: Optional[int] = None,
                       nir_band: Optional[int] = None):
    """Pick red/NIR band indices; unset indices resolve to the bands nearest 660/800 nm."""
    if red_band is None or nir_band is None:
        if cube.wavelengths is None:
            raise ValueError("cube has no wavelengths; red_band and nir_band must be given")
        if red_band is None:
            red_band = int(np.argmin(np.abs(cube.wavelengths - RED_NM)))
        if nir_band is None:
            nir_band = int(np.argmin(np.abs(cube.wavelengths - NIR_NM)))
    red_band, nir_band = int(red_band), int(nir_band)
    for idx in (red_band, nir_band):
        if not 0 <= idx < cube.bands:
            raise ValueError(f"band index {idx} out of range for {cube.bands} bands")
    if red_band == nir_band:
        raise ValueError("red_band and nir_band must differ")
    return red_band, nir_band


def ndvi(cube: Cube, red_band: Optional[int] = None, nir_band: Optional[int] = None) -> np.ndarray:
    red_band, nir_band = resolve_ndvi_bands(cube, red_band, nir_band)
    y = np.clip(cube.data, 0.0, 1.0)
    red, nir = y[red_band], y[nir_band]
    denom = nir + red
    out = np.zeros_like(denom)
    ok = denom >= 1e-12
    out[ok] = (nir[ok] - red[ok]) / denom[ok]
    return out


def ndvi_gradient(ndvi_map: np.ndarray) -> np.ndarray:
    """Gradient magnitude; central differences inside, one-sided at the borders."""
    ndvi_map = np.asarray(ndvi_map, dtype=np.float64)
    if ndvi_map.ndim != 2 or min(ndvi_map.shape) < 2:
        raise ValueError("NDVI gradient needs a map of at least 2x2")
    gy, gx = np.gradient(ndvi_map)
    return np.sqrt(gx * gx + gy * gy)


def _check_scales(scales):
    scales = [int(r) for r in scales]
    if not scales:
        raise ValueError("at least one structuring-element radius is required")
    if scales[0] < 1 or any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError("radii must be positive and strictly increasing")
    return scales


def morphological_profile(base: np.ndarray, scales: Sequence[int] = (1, 2, 3)) -> np.ndarray:
    """Stack ``[open(r_max) .. open(r_min), base, close(r_min) .. close(r_max)]``.

    Flat square structuring elements of side ``2r+1``; borders replicate
    the nearest pixel.
    """
    scales = _check_scales(scales)
    base = np.asarray(base, dtype=np.float64)
    openings, closings = [], []
    for r in scales:
        size = (2 * r + 1, 2 * r + 1)
        openings.append(ndimage.grey_opening(base, size=size, mode="nearest"))
        closings.append(ndimage.grey_closing(base, size=size, mode="nearest"))
    return np.stack(openings[::-1] + [base] + closings)


def emp_feature(base: np.ndarray, scales: Sequence[int] = (1, 2, 3)) -> np.ndarray:
    return morphological_profile(base, scales).std(axis=0)


def dmp_feature(base: np.ndarray, scales: Sequence[int] = (1, 2, 3)) -> np.ndarray:
    profile = morphological_profile(base, scales)
    if profile.shape[0] < 2:
        raise ValueError("differential profile needs at least 2 levels")
    return np.abs(np.diff(profile, axis=0)).max(axis=0)


def lbp_codes(base: np.ndarray) -> np.ndarray:
    """8-bit patterns ``(rows-2, cols-2, 8)`` for interior pixels; bit set when neighbor ≥ center."""
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 2 or min(base.shape) < 3:
        raise ValueError("LBP needs a map of at least 3x3")
    rows, cols = base.shape
    center = base[1:-1, 1:-1]
    bits = [base[1 + dr:rows - 1 + dr, 1 + dc:cols - 1 + dc] >= center for dr, dc in _LBP_OFFSETS]
    return np.stack(bits, axis=-1)


def lbp_feature(base: np.ndarray) -> np.ndarray:
    """Fraction of 0/1 transitions around each pixel's circular LBP pattern."""
    bits = lbp_codes(base)
    transitions = (bits != np.roll(bits, -1, axis=-1)).sum(axis=-1) / 8.0
    return np.pad(transitions, 1, mode="edge")


def compute_features(cube: Cube, red_band: Optional[int] = None, nir_band: Optional[int] = None,
                     scales: Sequence[int] = (1, 2, 3)) -> FeatureMatrix:
    """All six raw (unstandardized) feature planes of ``cube``."""
    base = base_image(cube)
    nd = ndvi(cube, red_band, nir_band)
    planes = [
        spectral_curvature(cube),
        nd,
        ndvi_gradient(nd),
        emp_feature(base, scales),
        dmp_feature(base, scales),
        lbp_feature(base),
    ]
    return FeatureMatrix(np.stack(planes))


def standardize(raw: FeatureMatrix, mean=None, std=None) -> FeatureMatrix:
    """Z-score each plane over all pixels (population std).

    A constant plane maps to zeros with ``std`` recorded as 0. Passing
    ``mean``/``std`` applies previously fitted statistics instead.
    """
    planes = raw.planes
    if mean is None or std is None:
        flat = planes.reshape(raw.K, -1)
        mean = flat.mean(axis=1)
        std = flat.std(axis=1)
        std = np.where(np.ptp(flat, axis=1) == 0, 0.0, std)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    out = np.zeros_like(planes)
    for k in range(raw.K):
        if std[k] > 0:
            out[k] = (planes[k] - mean[k]) / std[k]
    return FeatureMatrix(out, standardized=True, mean=mean, std=std)


def compute_prior(raw: FeatureMatrix) -> np.ndarray:
    """Equal-weight mean of the min-max normalized planes; constant planes count as 0.5."""
    normalized = np.empty_like(raw.planes)
    for k in range(raw.K):
        plane = raw.planes[k]
        lo, hi = plane.min(), plane.max()
        normalized[k] = 0.5 if hi == lo else (plane - lo) / (hi - lo)
    return np.clip(normalized.mean(axis=0), 0.0, 1.0)
