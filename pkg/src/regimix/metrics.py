"""Reconstruction quality and regime-map coherence metrics.

Scene-level functions take pixel matrices ``(N, bands)`` or cubes
``(bands, rows, cols)``; both arguments must share a layout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

RRMSE_DEFINITION = "rrmse = mean over pixels of ||y_i - yhat_i||_2 / ||y_i||_2 (zero-norm pixels excluded)"


class MaskedMean(NamedTuple):
    value: float
    masked: int


@dataclass
class SceneMetrics:
    sad: float
    rmse: float
    rrmse: float
    rho: float = float("nan")


def _as_pixels(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x.reshape(x.shape[0], -1).T
    if x.ndim == 1:
        return x[None, :]
    return x


def _check_same(y, y_hat):
    if y.shape != y_hat.shape:
        raise ValueError(f"dimension mismatch: {y.shape} vs {y_hat.shape}")


def spectral_angle(y, y_hat) -> float:
    """Angle in radians between two nonzero spectra."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    ny, nh = np.linalg.norm(y), np.linalg.norm(y_hat)
    if ny == 0 or nh == 0:
        raise ValueError("spectral angle undefined for a zero-norm spectrum")
    return float(np.arccos(np.clip(np.dot(y, y_hat) / (ny * nh), -1.0, 1.0)))


def sad_per_pixel(y, y_hat):
    """Per-pixel angles; NaN where either spectrum has zero norm."""
    y, y_hat = _as_pixels(y), _as_pixels(y_hat)
    _check_same(y, y_hat)
    ny = np.linalg.norm(y, axis=1)
    nh = np.linalg.norm(y_hat, axis=1)
    ok = (ny > 0) & (nh > 0)
    cos = np.einsum("ij,ij->i", y, y_hat) / np.where(ok, ny * nh, 1.0)
    return np.where(ok, np.arccos(np.clip(cos, -1.0, 1.0)), np.nan)


def sad(y, y_hat, full_output=False):
    """Scene mean spectral angle distance; zero-norm pixels are left out of the mean."""
    angles = sad_per_pixel(y, y_hat)
    ok = np.isfinite(angles)
    if not ok.any():
        raise ValueError("every pixel has a zero-norm spectrum")
    result = MaskedMean(float(angles[ok].mean()), int((~ok).sum()))
    return result if full_output else result.value


def rmse(y, y_hat) -> float:
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    _check_same(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def rrmse(y, y_hat, full_output=False):
    """Mean per-pixel relative error ``||y - y_hat|| / ||y||``."""
    y, y_hat = _as_pixels(y), _as_pixels(y_hat)
    _check_same(y, y_hat)
    ny = np.linalg.norm(y, axis=1)
    ok = ny > 0
    if not ok.any():
        raise ValueError("rRMSE undefined: every pixel has a zero-norm spectrum")
    rel = np.linalg.norm(y - y_hat, axis=1)[ok] / ny[ok]
    result = MaskedMean(float(rel.mean()), int((~ok).sum()))
    return result if full_output else result.value


def coherence_rho(xi_map, gain_map) -> float:
    """Pearson correlation between the regime map and the reconstruction-gain map."""
    a = np.asarray(xi_map, dtype=np.float64).ravel()
    b = np.asarray(gain_map, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("maps must have the same shape")
    if a.size == 0 or np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValueError("correlation undefined for a constant map")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt(np.dot(a, a)), np.sqrt(np.dot(b, b))
    if na == 0 or nb == 0:
        raise ValueError("correlation undefined for a constant map")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def scene_metrics(y, y_hat, xi_map=None, gain_map=None) -> SceneMetrics:
    rho = float("nan")
    if xi_map is not None and gain_map is not None:
        rho = coherence_rho(xi_map, gain_map)
    return SceneMetrics(sad(y, y_hat), rmse(y, y_hat), rrmse(y, y_hat), rho)
