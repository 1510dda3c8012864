"""Synthetic scenes with a known per-pixel mixing regime.

All randomness comes from one ``numpy.random.PCG64`` stream seeded from
``SynthSpec.seed``, consumed in a fixed order: endmembers, abundances, noise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .cube_io import Cube, EndmemberSet
from .metrics import spectral_angle
from .models import HapkeGeometry, gbm_residual, hapke_residual, lmm_reconstruct

RNG_NAME = "numpy.random.PCG64"
LAYOUTS = ("half-split", "blocks", "all-linear", "all-nonlinear")
MECHANISMS = ("bilinear", "ppnm", "hapke")
# per-pixel mechanism codes
LINEAR, BILINEAR, PPNM, HAPKE = 0, 1, 2, 3

MIN_PAIR_SAD = 0.15
MAX_TRIES = 100


@dataclass(frozen=True)
class SynthSpec:
    rows: int = 64
    cols: int = 64
    bands: int = 50
    M: int = 3
    layout: str = "half-split"
    mechanism: str = "bilinear"
    gamma: float = 0.9
    ppnm_b: float = 0.5
    sigma: float = 0.005
    seed: int = 0
    mu0: float = 1.0
    mu: float = 1.0
    wavelength_start: float = 400.0
    wavelength_end: float = 1000.0

    def __post_init__(self):
        if min(self.rows, self.cols, self.M) < 2:
            raise ValueError("rows, cols and M must be ≥ 2")
        if self.bands < 3:
            raise ValueError("bands must be ≥ 3")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be ≥ 0")
        if not self.wavelength_end > self.wavelength_start:
            raise ValueError("wavelength range must be increasing")
        HapkeGeometry(self.mu0, self.mu)

    def as_dict(self):
        return asdict(self)


@dataclass
class SyntheticScene:
    cube: Cube
    endmembers: EndmemberSet
    abundances: np.ndarray   # (M, rows, cols)
    labels: np.ndarray       # (rows, cols), 1 = nonlinear
    mechanism: np.ndarray    # (rows, cols), LINEAR/BILINEAR/PPNM/HAPKE
    spec: SynthSpec


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _bump_spectrum(rng, x):
    spectrum = np.full_like(x, rng.uniform(0.15, 0.6))
    for _ in range(int(rng.integers(2, 5))):
        center = rng.uniform(-0.1, 1.1)
        width = rng.uniform(0.08, 0.3)
        amplitude = rng.uniform(-0.35, 0.45)
        spectrum += amplitude * np.exp(-0.5 * ((x - center) / width) ** 2)
    return np.clip(spectrum, 0.05, 0.95)


def generate_endmembers(bands, M, seed=0, rng: Optional[np.random.Generator] = None) -> EndmemberSet:
    """Smooth random spectra built from Gaussian bumps, pairwise SAD ≥ 0.15 rad."""
    if bands < 3 or M < 2:
        raise ValueError("need bands ≥ 3 and M ≥ 2")
    rng = make_rng(seed) if rng is None else rng
    x = np.linspace(0.0, 1.0, bands)
    for _ in range(MAX_TRIES):
        E = np.stack([_bump_spectrum(rng, x) for _ in range(M)], axis=1)
        sads = [spectral_angle(E[:, m], E[:, n]) for m in range(M) for n in range(m + 1, M)]
        if min(sads) >= MIN_PAIR_SAD:
            return EndmemberSet(E, [f"em{m}" for m in range(M)])
    raise RuntimeError(f"could not draw {M} endmembers with pairwise SAD ≥ {MIN_PAIR_SAD} "
                       f"in {MAX_TRIES} tries")


def sample_simplex(rng, n, M):
    """Uniform draws on the probability simplex via sorted-uniform spacings."""
    u = np.sort(rng.uniform(size=(n, M - 1)), axis=1)
    edges = np.hstack([np.zeros((n, 1)), u, np.ones((n, 1))])
    return np.diff(edges, axis=1)


def regime_labels(layout, rows, cols) -> np.ndarray:
    labels = np.zeros((rows, cols), dtype=np.int64)
    if layout == "half-split":
        labels[:, cols // 2:] = 1
    elif layout == "blocks":
        block = max(1, min(rows, cols) // 4)
        r = np.arange(rows)[:, None] // block
        c = np.arange(cols)[None, :] // block
        labels = ((r + c) % 2).astype(np.int64)
    elif layout == "all-nonlinear":
        labels[:] = 1
    elif layout != "all-linear":
        raise ValueError(f"unknown layout {layout!r}")
    return labels


def generate_scene(spec: SynthSpec) -> SyntheticScene:
    rng = make_rng(spec.seed)
    em = generate_endmembers(spec.bands, spec.M, rng=rng)
    E = em.spectra
    n = spec.rows * spec.cols
    A = sample_simplex(rng, n, spec.M)
    noise = rng.normal(0.0, 1.0, size=(n, spec.bands)) * spec.sigma

    labels = regime_labels(spec.layout, spec.rows, spec.cols)
    nl = labels.ravel() == 1
    Y = lmm_reconstruct(A, E)
    code = {"bilinear": BILINEAR, "ppnm": PPNM, "hapke": HAPKE}[spec.mechanism]
    if nl.any():
        if spec.mechanism == "bilinear":
            gamma = np.full(spec.M * (spec.M - 1) // 2, spec.gamma)
            Y[nl] += gbm_residual(A[nl], E, gamma)
        elif spec.mechanism == "ppnm":
            Y[nl] += spec.ppnm_b * Y[nl] ** 2
        else:
            Y[nl] += hapke_residual(A[nl], E, HapkeGeometry(spec.mu0, spec.mu))
    Y = np.clip(Y + noise, 0.0, 1.0)

    wavelengths = np.linspace(spec.wavelength_start, spec.wavelength_end, spec.bands)
    cube = Cube(Y.T.reshape(spec.bands, spec.rows, spec.cols), wavelengths)
    abundances = A.T.reshape(spec.M, spec.rows, spec.cols)
    mechanism = np.where(labels == 1, code, LINEAR)
    return SyntheticScene(cube, em, abundances, labels, mechanism, spec)
