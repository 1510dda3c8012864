"""Fully constrained abundance estimation under the linear mixing model."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .cube_io import Cube, as_spectra


class FclsInfo(NamedTuple):
    converged: bool
    iterations: int


def nnls_active_set(A, b, tol=1e-10, max_iter=None):
    """Lawson-Hanson active-set NNLS: ``min ||A x - b||`` s.t. ``x >= 0``.

    The variable with the largest dual value enters the passive set; ties go
    to the lowest index. Returns ``(x, converged, iterations)``; when the
    outer iteration budget runs out the current (feasible) iterate is
    returned with ``converged=False``.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = A.shape[1]
    if max_iter is None:
        max_iter = 3 * n
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = A.T @ (b - A @ x)
    it = 0
    converged = True
    while (~passive).any():
        candidates = np.where(passive, -np.inf, w)
        j = int(np.argmax(candidates))
        if candidates[j] <= tol:
            break
        if it >= max_iter:
            converged = False
            break
        it += 1
        passive[j] = True
        for _ in range(3 * n + 1):
            idx = np.flatnonzero(passive)
            z = np.zeros(n)
            z[idx] = np.linalg.lstsq(A[:, idx], b, rcond=None)[0]
            if np.all(z[idx] > 0):
                x = z
                break
            # step back towards x until the first passive variable hits zero
            blocking = idx[z[idx] <= 0]
            denom = x[blocking] - z[blocking]
            ratios = np.where(denom > 0, x[blocking] / np.where(denom > 0, denom, 1.0), 0.0)
            step = ratios.min()
            x = x + step * (z - x)
            passive &= ~((x <= tol) & passive)
            x[~passive] = 0.0
            if not passive.any():
                break
        w = A.T @ (b - A @ x)
    return x, converged, it


def _polish_on_support(y, E, a):
    """Exact sum-to-one least squares restricted to the support of ``a``.

    Negative components are dropped (most negative first, ties to the lowest
    index) and the equality-constrained system re-solved. Returns None when
    no nonnegative solution is found.
    """
    support = a > 0
    M = E.shape[1]
    for _ in range(M):
        idx = np.flatnonzero(support)
        if idx.size == 0:
            return None
        Es = E[:, idx]
        n = idx.size
        kkt = np.zeros((n + 1, n + 1))
        kkt[:n, :n] = Es.T @ Es
        kkt[:n, n] = 1.0
        kkt[n, :n] = 1.0
        rhs = np.append(Es.T @ y, 1.0)
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:n]
        if np.all(sol >= 0):
            out = np.zeros(M)
            out[idx] = sol
            return out
        support[idx[np.argmin(sol)]] = False
    return None


def fcls(y, E, tol=1e-10, max_iter=None, full_output=False):
    """Fully constrained least squares abundances for one spectrum.

    Sum-to-one is imposed by appending a row of ``delta`` (and ``delta`` to
    ``y``), with ``delta = 10 * max|E|``; the augmented system is solved by
    active-set NNLS and the result renormalized to sum exactly to one. The
    penalty row only enforces the sum approximately, so the solution is then
    polished by an exact equality-constrained solve on the NNLS support; the
    polished point is kept only if its objective is lower.

    Parameters
    ----------
    y : array_like, shape (bands,)
    E : EndmemberSet or array_like, shape (bands, M)
    tol : float
        Dual-feasibility tolerance of the active-set loop.
    max_iter : int, optional
        Outer iteration budget, default ``10 * M``.
    full_output : bool
        Also return an :class:`FclsInfo`.

    Returns
    -------
    a : ndarray, shape (M,)
    info : FclsInfo
        Only when ``full_output`` is true.
    """
    E = as_spectra(E)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (E.shape[0],):
        raise ValueError(f"spectrum has {y.size} bands, endmembers have {E.shape[0]}")
    M = E.shape[1]
    if max_iter is None:
        max_iter = 10 * M
    delta = 10.0 * np.abs(E).max()
    if delta == 0:
        delta = 1.0
    A = np.vstack([E, np.full((1, M), delta)])
    rhs = np.append(y, delta)
    x, converged, it = nnls_active_set(A, rhs, tol=tol, max_iter=max_iter)
    x = np.clip(x, 0.0, None)
    total = x.sum()
    a = x / total if total > 0 else np.full(M, 1.0 / M)
    polished = _polish_on_support(y, E, a)
    if polished is not None:
        polished = polished / polished.sum()
        if np.linalg.norm(y - E @ polished) < np.linalg.norm(y - E @ a):
            a = polished
    if full_output:
        return a, FclsInfo(converged, it)
    return a


def unmix_pixels(Y, E, tol=1e-10, max_iter=None) -> np.ndarray:
    """Run :func:`fcls` over the rows of ``Y`` ``(N, bands)``; returns ``(N, M)``."""
    E = as_spectra(E)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape[1] != E.shape[0]:
        raise ValueError(f"band mismatch: pixels have {Y.shape[1]} bands, endmembers {E.shape[0]}")
    out = np.empty((Y.shape[0], E.shape[1]))
    for i in range(Y.shape[0]):
        out[i] = fcls(Y[i], E, tol=tol, max_iter=max_iter)
    return out


def unmix_scene(cube: Cube, E, tol=1e-10, max_iter=None) -> np.ndarray:
    """Abundance maps ``(M, rows, cols)`` for every pixel of ``cube``."""
    E = as_spectra(E)
    if cube.bands != E.shape[0]:
        raise ValueError(f"band mismatch: cube has {cube.bands} bands, endmembers {E.shape[0]}")
    A = unmix_pixels(cube.pixels(), E, tol=tol, max_iter=max_iter)
    return A.T.reshape(E.shape[1], cube.rows, cube.cols)
