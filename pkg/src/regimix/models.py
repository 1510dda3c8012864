"""Linear reconstruction, nonlinear residual models and their attention mix.

Every nonlinear model is expressed as a residual on top of the linear
mixture ``s_lin = E a``, so a pixel is reconstructed as
``s_lin + xi * sum_k alpha_k * delta_k``. Functions broadcast over leading
pixel axes: ``a`` may be ``(M,)`` or ``(N, M)``, spectra ``(bands,)`` or
``(N, bands)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .cube_io import as_spectra

MODEL_NAMES = ("gbm", "ppnm", "hapke")
SSA_MAX = 1.0 - 1e-9


def sigmoid(z):
    """Logistic function without overflow for large ``|z|``."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


@dataclass
class AttentionParams:
    """Attention logits ``l_k = u_k . F + c_k``, softmax at temperature ``tau``."""

    u: np.ndarray
    c: np.ndarray
    tau: float = 1.0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.u.ndim != 2 or self.u.shape[0] != len(MODEL_NAMES):
            raise ValueError("u must have shape (3, K)")
        if self.c.shape != (len(MODEL_NAMES),):
            raise ValueError("c must have shape (3,)")
        if not self.tau > 0:
            raise ValueError("temperature must be positive")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.c))):
            raise ValueError("attention parameters must be finite")

    @classmethod
    def zeros(cls, K, tau=1.0):
        return cls(np.zeros((len(MODEL_NAMES), K)), np.zeros(len(MODEL_NAMES)), tau)


@dataclass
class GbmParams:
    """Pairwise interaction strengths, stored unconstrained; ``gamma = sigmoid(raw)``."""

    raw: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)

    @classmethod
    def zeros(cls, M):
        return cls(np.zeros(len(endmember_pairs(M))))

    @property
    def gamma(self):
        return sigmoid(self.raw)


@dataclass(frozen=True)
class HapkeGeometry:
    """Cosines of the incidence (``mu0``) and emergence (``mu``) angles."""

    mu0: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        for name in ("mu0", "mu"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")


def endmember_pairs(M):
    """Index pairs ``(m, n)`` with ``m < n`` in lexicographic order."""
    return list(combinations(range(M), 2))


def pair_spectra(E) -> np.ndarray:
    """Element-wise products ``e_m * e_n`` for every pair, ``(bands, P)``."""
    E = as_spectra(E)
    pairs = endmember_pairs(E.shape[1])
    if not pairs:
        return np.zeros((E.shape[0], 0))
    return np.stack([E[:, m] * E[:, n] for m, n in pairs], axis=1)


def pair_abundances(a) -> np.ndarray:
    """Products ``a_m a_n`` for every pair, ``(..., P)``."""
    a = np.asarray(a, dtype=np.float64)
    pairs = endmember_pairs(a.shape[-1])
    if not pairs:
        return np.zeros(a.shape[:-1] + (0,))
    return np.stack([a[..., m] * a[..., n] for m, n in pairs], axis=-1)


def lmm_reconstruct(a, E):
    E = as_spectra(E)
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != E.shape[1]:
        raise ValueError(f"{a.shape[-1]} abundances for {E.shape[1]} endmembers")
    return a @ E.T


def gbm_residual(a, E, gamma):
    """Bilinear scattering term ``sum_{m<n} gamma_mn a_m a_n (e_m * e_n)``.

    ``gamma`` may be a :class:`GbmParams` or the constrained values directly.
    """
    if isinstance(gamma, GbmParams):
        gamma = gamma.gamma
    gamma = np.asarray(gamma, dtype=np.float64)
    return (pair_abundances(a) * gamma) @ pair_spectra(E).T


def ppnm_fit_b(y, s_lin, b_max=5.0):
    """Least-squares coefficient of the quadratic term ``b * s_lin**2``, clamped to ``[-b_max, b_max]``."""
    y = np.asarray(y, dtype=np.float64)
    s_lin = np.asarray(s_lin, dtype=np.float64)
    sq = s_lin * s_lin
    num = np.sum((y - s_lin) * sq, axis=-1)
    den = np.sum(sq * sq, axis=-1)
    safe = np.where(den < 1e-12, 1.0, den)
    b = np.where(den < 1e-12, 0.0, num / safe)
    b = np.clip(b, -b_max, b_max)
    return b if b.ndim else float(b)


def ppnm_residual(s_lin, b):
    s_lin = np.asarray(s_lin, dtype=np.float64)
    return np.asarray(b, dtype=np.float64)[..., None] * s_lin * s_lin


def h_function(mu, w):
    """Chandrasekhar H-function, isotropic scatterers, two-stream approximation."""
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0) or np.any(w >= 1):
        raise ValueError("single-scattering albedo must lie in [0, 1)")
    return (1.0 + 2.0 * mu) / (1.0 + 2.0 * mu * np.sqrt(1.0 - w))


def ssa_to_refl(w, geometry: HapkeGeometry = HapkeGeometry()):
    """Bidirectional reflectance of a medium with albedo ``w`` (isotropic phase, no opposition surge)."""
    w = np.asarray(w, dtype=np.float64)
    g = geometry
    r = w / 4.0 / (g.mu0 + g.mu) * h_function(g.mu0, w) * h_function(g.mu, w)
    return r if r.ndim else float(r)


def refl_to_ssa(r, geometry: HapkeGeometry = HapkeGeometry()):
    """Invert :func:`ssa_to_refl` by bisection on ``w in [0, 1 - 1e-9]``.

    ``r`` is clamped into the attainable range first, so every input maps to
    some albedo.
    """
    r = np.asarray(r, dtype=np.float64)
    r_top = ssa_to_refl(SSA_MAX, geometry)
    target = np.clip(r, 0.0, r_top)
    lo = np.zeros_like(target)
    hi = np.where(target == 0, 0.0, SSA_MAX)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = ssa_to_refl(mid, geometry)
        below = val < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(hi, 1e-300)):
            break
    w = 0.5 * (lo + hi)
    return w if w.ndim else float(w)


def hapke_residual(a, E, geometry: HapkeGeometry = HapkeGeometry()):
    """Intimate-mixture residual: mix in albedo space, map back, subtract ``E a``."""
    E = as_spectra(E)
    w_em = refl_to_ssa(E, geometry)
    a = np.asarray(a, dtype=np.float64)
    w_mix = np.clip(a @ w_em.T, 0.0, SSA_MAX)
    return ssa_to_refl(w_mix, geometry) - lmm_reconstruct(a, E)


def attention_logits(F, p: AttentionParams):
    return np.asarray(F, dtype=np.float64) @ p.u.T + p.c


def softmax(logits, tau=1.0):
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def attention_weights(F, p: AttentionParams):
    """Per-pixel model weights ``softmax((u F + c) / tau)``, shape ``(..., 3)``."""
    return softmax(attention_logits(F, p), p.tau)


def attention_entropy(alpha):
    alpha = np.asarray(alpha, dtype=np.float64)
    safe = np.where(alpha > 0, alpha, 1.0)
    h = -np.sum(np.where(alpha > 0, alpha * np.log(safe), 0.0), axis=-1)
    return h if h.ndim else float(h)


def combined_residual(alpha, deltas):
    """``sum_k alpha_k delta_k``; ``deltas`` is ``(..., 3, bands)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    return np.einsum("...k,...kb->...b", alpha, deltas)
