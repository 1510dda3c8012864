"""Feature-gated regime selection: forward model, objective, gradients, training.

A pixel is reconstructed as ``yhat = s_lin + xi * delta_nl`` with

* ``xi = sigmoid(w . F + b)`` from standardized features ``F``,
* ``delta_nl = sum_k alpha_k delta_k`` over the GBM, PPNM and Hapke residuals,
* ``alpha = softmax((u F + c) / tau)``.

Abundances are estimated once by FCLS and held fixed. The objective summed
over pixels is::

    -tanh(gain) + lam_feat (xi - prior)^2            per pixel
    + lam_sp * sum_edges (xi_i - xi_j)^2             4-neighbour Dirichlet energy
    + lam_w ||w||^2 + lam_ent * sum_i H(alpha_i)

where ``gain = ||y - s_lin|| - ||y - yhat||``. All parameters are trained by
full-batch Adam from the maximum-entropy start (``xi = 0.5``, uniform
``alpha``, ``gamma = 0.5``).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import features as feat
from .abundance import unmix_pixels
from .cube_io import Cube, as_spectra, maps_from_pixels
from .models import (
    MODEL_NAMES, AttentionParams, GbmParams, HapkeGeometry, attention_entropy,
    attention_weights, hapke_residual, pair_abundances, pair_spectra, ppnm_fit_b,
    ppnm_residual, sigmoid,
)

log = logging.getLogger(__name__)

TERMS = ("reconstruction", "prior", "spatial", "weight_decay", "entropy")
GBM, PPNM, HAPKE = 0, 1, 2


class NumericalError(ArithmeticError):
    """A loss term or gradient became non-finite."""


@dataclass
class TrainConfig:
    lambda_feat0: float = 1.0
    lambda_feat_final: float = 0.1
    lambda_sp: float = 0.01
    lambda_w: float = 1e-4
    lambda_ent: float = 0.01
    tau: float = 1.0
    learning_rate: float = 0.01
    epochs: int = 500
    seed: int = 0
    b_max: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mu0: float = 1.0
    mu: float = 1.0
    red_band: Optional[int] = None
    nir_band: Optional[int] = None
    emp_scales: tuple = (1, 2, 3)

    def __post_init__(self):
        for name in ("lambda_feat0", "lambda_feat_final", "lambda_sp", "lambda_w", "lambda_ent"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and ≥ 0, got {v}")
        if int(self.epochs) < 1:
            raise ValueError("epochs must be ≥ 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("moment decays must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if not self.b_max >= 0:
            raise ValueError("b_max must be ≥ 0")
        self.epochs = int(self.epochs)
        self.emp_scales = tuple(int(r) for r in self.emp_scales)
        HapkeGeometry(self.mu0, self.mu)

    @property
    def geometry(self) -> HapkeGeometry:
        return HapkeGeometry(self.mu0, self.mu)

    def as_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class RegimeParams:
    w: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = float(self.b)
        if not (np.all(np.isfinite(self.w)) and np.isfinite(self.b)):
            raise ValueError("regime parameters must be finite")


# ---------------------------------------------------------------------------
# per-pixel building blocks

def xi(F, p: RegimeParams):
    """Regime scalar ``sigmoid(w . F + b)`` for one pixel ``(K,)`` or many ``(N, K)``."""
    return sigmoid(np.asarray(F, dtype=np.float64) @ p.w + p.b)


def feature_contributions(F, p: RegimeParams):
    """Per-feature terms ``w_k F_k`` and the dominant feature ``argmax_k |w_k F_k|``.

    Ties resolve to the lowest feature index.
    """
    contrib = np.asarray(F, dtype=np.float64) * p.w
    dominant = np.argmax(np.abs(contrib), axis=-1)
    return contrib, dominant


def reconstruction_gain(y, s_lin, y_hat):
    """``||y - s_lin|| - ||y - y_hat||`` along the last axis."""
    y = np.asarray(y, dtype=np.float64)
    g = (np.linalg.norm(y - np.asarray(s_lin), axis=-1)
         - np.linalg.norm(y - np.asarray(y_hat), axis=-1))
    return g if np.ndim(g) else float(g)


def laplacian_penalty(xi_map) -> float:
    """Sum of squared differences over 4-neighbour edges."""
    x = np.asarray(xi_map, dtype=np.float64)
    dx = x[:, 1:] - x[:, :-1]
    dy = x[1:, :] - x[:-1, :]
    return float(np.sum(dx * dx) + np.sum(dy * dy))


def laplacian_penalty_grad(xi_map) -> np.ndarray:
    x = np.asarray(xi_map, dtype=np.float64)
    g = np.zeros_like(x)
    dx = x[:, 1:] - x[:, :-1]
    dy = x[1:, :] - x[:-1, :]
    g[:, 1:] += 2 * dx
    g[:, :-1] -= 2 * dx
    g[1:, :] += 2 * dy
    g[:-1, :] -= 2 * dy
    return g


def anneal_lambda_feat(epoch, config: TrainConfig) -> float:
    """Linear schedule from ``lambda_feat0`` (epoch 0) to ``lambda_feat_final`` (last epoch)."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.epochs == 1:
        return float(config.lambda_feat0)
    t = epoch / (config.epochs - 1)
    return float(config.lambda_feat0 + t * (config.lambda_feat_final - config.lambda_feat0))


# ---------------------------------------------------------------------------
# scene state and parameter packing

@dataclass
class SceneState:
    """Everything about a scene that stays fixed during training."""

    rows: int
    cols: int
    Y: np.ndarray            # (N, L) observed
    A: np.ndarray            # (N, M) abundances
    S: np.ndarray            # (N, L) linear reconstruction
    pair_a: np.ndarray       # (N, P)
    pair_s: np.ndarray       # (L, P)
    ppnm_b: np.ndarray       # (N,)
    D_ppnm: np.ndarray       # (N, L)
    D_hapke: np.ndarray      # (N, L)
    F: np.ndarray            # (N, K) standardized features
    prior: np.ndarray        # (N,)
    feature_mean: np.ndarray
    feature_std: np.ndarray
    raw_features: Optional[np.ndarray] = None

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def K(self):
        return self.F.shape[1]

    @property
    def P(self):
        return self.pair_s.shape[1]

    @property
    def lin_err(self):
        return np.linalg.norm(self.Y - self.S, axis=1)


def prepare_scene(cube: Cube, E, config: TrainConfig, abundances=None,
                  feature_stats=None) -> SceneState:
    """Precompute abundances, fixed residuals, features and prior for ``cube``.

    ``abundances`` may be passed as ``(M, rows, cols)`` to skip FCLS;
    ``feature_stats=(mean, std)`` standardizes with previously fitted statistics.
    """
    E = as_spectra(E)
    if cube.bands != E.shape[0]:
        raise ValueError(f"band mismatch: cube has {cube.bands} bands, endmembers {E.shape[0]}")
    Y = cube.pixels()
    if abundances is None:
        A = unmix_pixels(Y, E)
    else:
        abundances = np.asarray(abundances, dtype=np.float64)
        if abundances.shape != (E.shape[1], cube.rows, cube.cols):
            raise ValueError(f"abundance maps have shape {abundances.shape}")
        A = abundances.reshape(E.shape[1], -1).T.copy()
    S = A @ E.T
    b = ppnm_fit_b(Y, S, config.b_max)
    raw = feat.compute_features(cube, config.red_band, config.nir_band, config.emp_scales)
    if feature_stats is None:
        std = feat.standardize(raw)
    else:
        std = feat.standardize(raw, *feature_stats)
    return SceneState(
        rows=cube.rows, cols=cube.cols, Y=Y, A=A, S=S,
        pair_a=pair_abundances(A), pair_s=pair_spectra(E),
        ppnm_b=np.atleast_1d(b), D_ppnm=ppnm_residual(S, b),
        D_hapke=hapke_residual(A, E, config.geometry),
        F=std.pixels(), prior=feat.compute_prior(raw).ravel(),
        feature_mean=std.mean, feature_std=std.std, raw_features=raw.planes,
    )


@dataclass
class Params:
    """All trainable parameters; ``flat()``/``from_flat`` give the optimizer view."""

    regime: RegimeParams
    attention: AttentionParams
    gbm: GbmParams

    @classmethod
    def initial(cls, K, P, tau=1.0):
        return cls(RegimeParams(np.zeros(K), 0.0), AttentionParams.zeros(K, tau), GbmParams(np.zeros(P)))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.regime.w, [self.regime.b], self.attention.u.ravel(),
                               self.attention.c, self.gbm.raw])

    @classmethod
    def from_flat(cls, theta, K, P, tau=1.0):
        theta = np.asarray(theta, dtype=np.float64)
        n_att = len(MODEL_NAMES)
        expected = K + 1 + n_att * K + n_att + P
        if theta.shape != (expected,):
            raise ValueError(f"parameter vector has {theta.size} entries, expected {expected}")
        i = 0
        w = theta[i:i + K]; i += K
        b = theta[i]; i += 1
        u = theta[i:i + n_att * K].reshape(n_att, K); i += n_att * K
        c = theta[i:i + n_att]; i += n_att
        raw = theta[i:i + P]
        return cls(RegimeParams(w.copy(), b), AttentionParams(u.copy(), c.copy(), tau), GbmParams(raw.copy()))

    @staticmethod
    def slices(K, P):
        n_att = len(MODEL_NAMES)
        bounds = np.cumsum([0, K, 1, n_att * K, n_att, P])
        names = ("w", "b", "u", "c", "gamma_raw")
        return {n: slice(int(lo), int(hi)) for n, lo, hi in zip(names, bounds[:-1], bounds[1:])}


@dataclass
class Overrides:
    """Freeze the gate and/or attention (used for the uniform-nonlinear baselines)."""

    xi: Optional[float] = None
    model: Optional[int] = None


# ---------------------------------------------------------------------------
# forward / loss / gradient

def _forward(state: SceneState, params: Params, overrides: Overrides = Overrides()):
    F = state.F
    if overrides.xi is None:
        xi_v = sigmoid(F @ params.regime.w + params.regime.b)
    else:
        xi_v = np.full(state.N, float(overrides.xi))
    if overrides.model is None:
        alpha = attention_weights(F, params.attention)
    else:
        alpha = np.zeros((state.N, len(MODEL_NAMES)))
        alpha[:, overrides.model] = 1.0
    gamma = params.gbm.gamma
    D_gbm = (state.pair_a * gamma) @ state.pair_s.T
    D_nl = alpha[:, GBM, None] * D_gbm + alpha[:, PPNM, None] * state.D_ppnm + alpha[:, HAPKE, None] * state.D_hapke
    Y_hat = state.S + xi_v[:, None] * D_nl
    R = state.Y - Y_hat
    res_norm = np.linalg.norm(R, axis=1)
    gain = state.lin_err - res_norm
    return dict(xi=xi_v, alpha=alpha, gamma=gamma, D_gbm=D_gbm, D_nl=D_nl, Y_hat=Y_hat,
                R=R, res_norm=res_norm, gain=gain)


def _check_finite(name, values):
    values = np.asarray(values)
    bad = ~np.isfinite(values)
    if bad.any():
        idx = int(np.flatnonzero(bad.reshape(bad.shape[0], -1).any(axis=1) if bad.ndim > 1 else bad)[0])
        raise NumericalError(f"non-finite {name} term at pixel {idx}")


def loss_terms(state: SceneState, params: Params, lambda_feat: float, config: TrainConfig,
               overrides: Overrides = Overrides(), fwd=None) -> dict:
    """Each weighted objective term separately, keyed by :data:`TERMS`."""
    fwd = _forward(state, params, overrides) if fwd is None else fwd
    recon = -np.tanh(fwd["gain"])
    _check_finite("reconstruction", recon)
    prior = lambda_feat * (fwd["xi"] - state.prior) ** 2
    _check_finite("prior", prior)
    ent = attention_entropy(fwd["alpha"])
    _check_finite("entropy", ent)
    xi_map = fwd["xi"].reshape(state.rows, state.cols)
    return {
        "reconstruction": float(np.sum(recon)),
        "prior": float(np.sum(prior)),
        "spatial": config.lambda_sp * laplacian_penalty(xi_map),
        "weight_decay": config.lambda_w * float(params.regime.w @ params.regime.w),
        "entropy": config.lambda_ent * float(np.sum(ent)),
    }


def total_loss(state: SceneState, params: Params, lambda_feat: float, config: TrainConfig,
               overrides: Overrides = Overrides()) -> float:
    terms = loss_terms(state, params, lambda_feat, config, overrides)
    return float(sum(terms[t] for t in TERMS))


def loss_and_grad(state: SceneState, params: Params, lambda_feat: float, config: TrainConfig,
                  overrides: Overrides = Overrides()):
    """Objective value and its analytic gradient in :meth:`Params.flat` layout.

    Frozen parts (see :class:`Overrides`) contribute no gradient; only weight
    decay still acts on ``w`` when the gate is frozen. The PPNM
    coefficients depend only on the observed spectra and the fixed
    abundances, so they are constants here.
    """
    fwd = _forward(state, params, overrides)
    terms = loss_terms(state, params, lambda_feat, config, overrides, fwd=fwd)
    loss = float(sum(terms[t] for t in TERMS))

    xi_v, alpha, R = fwd["xi"], fwd["alpha"], fwd["R"]
    t = np.tanh(fwd["gain"])
    # d(-tanh(gain))/d(yhat) = -(1 - t^2) * (y - yhat) / ||y - yhat||
    safe = np.where(fwd["res_norm"] > 0, fwd["res_norm"], 1.0)
    scale = np.where(fwd["res_norm"] > 0, -(1.0 - t * t) / safe, 0.0)
    G = scale[:, None] * R

    K, P = state.K, state.P
    sl = Params.slices(K, P)
    grad = np.zeros(sl["gamma_raw"].stop)

    if overrides.xi is None:
        g_xi = np.einsum("ij,ij->i", G, fwd["D_nl"])
        g_xi += 2.0 * lambda_feat * (xi_v - state.prior)
        g_xi += config.lambda_sp * laplacian_penalty_grad(xi_v.reshape(state.rows, state.cols)).ravel()
        g_z = g_xi * xi_v * (1.0 - xi_v)
        grad[sl["w"]] = state.F.T @ g_z
        grad[sl["b"]] = np.sum(g_z)
    grad[sl["w"]] += 2.0 * config.lambda_w * params.regime.w

    if overrides.model is None:
        deltas = (fwd["D_gbm"], state.D_ppnm, state.D_hapke)
        g_alpha = np.stack([xi_v * np.einsum("ij,ij->i", G, d) for d in deltas], axis=1)
        safe_a = np.where(alpha > 0, alpha, 1.0)
        g_alpha -= config.lambda_ent * np.where(alpha > 0, np.log(safe_a) + 1.0, 0.0)
        g_logit = alpha * (g_alpha - np.sum(alpha * g_alpha, axis=1, keepdims=True)) / params.attention.tau
        grad[sl["u"]] = (g_logit.T @ state.F).ravel()
        grad[sl["c"]] = np.sum(g_logit, axis=0)

    if P:
        weight = xi_v * alpha[:, GBM]
        g_gamma = np.sum(weight[:, None] * (G @ state.pair_s) * state.pair_a, axis=0)
        gamma = fwd["gamma"]
        grad[sl["gamma_raw"]] = g_gamma * gamma * (1.0 - gamma)

    _check_finite("gradient", grad[None, :])
    return loss, grad, terms


# ---------------------------------------------------------------------------
# optimization

class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(self, size, learning_rate=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = learning_rate, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimize(state: SceneState, config: TrainConfig, overrides: Overrides = Overrides(),
             params: Optional[Params] = None, schedule: Optional[Sequence[float]] = None):
    """Run ``config.epochs`` full-batch Adam steps; returns ``(params, loss_trace)``.

    ``loss_trace[e]`` is the objective at the start of epoch ``e``.
    """
    if params is None:
        params = Params.initial(state.K, state.P, config.tau)
    theta = params.flat()
    opt = Adam(theta.size, config.learning_rate, config.beta1, config.beta2, config.eps)
    trace = np.empty(config.epochs)
    for epoch in range(config.epochs):
        lam = anneal_lambda_feat(epoch, config) if schedule is None else schedule[epoch]
        current = Params.from_flat(theta, state.K, state.P, config.tau)
        try:
            loss, grad, _ = loss_and_grad(state, current, lam, config, overrides)
        except NumericalError as exc:
            raise NumericalError(f"epoch {epoch}: {exc}") from None
        if not np.isfinite(loss):
            raise NumericalError(f"epoch {epoch}: non-finite loss")
        trace[epoch] = loss
        theta = opt.step(theta, grad)
    return Params.from_flat(theta, state.K, state.P, config.tau), trace


@dataclass
class SceneResult:
    xi: np.ndarray              # (rows, cols)
    alpha: np.ndarray           # (3, rows, cols)
    y_hat: np.ndarray           # (bands, rows, cols)
    s_lin: np.ndarray           # (bands, rows, cols)
    delta_res: np.ndarray       # (rows, cols)
    abundances: np.ndarray      # (M, rows, cols)
    dominant_feature: np.ndarray  # (rows, cols) int, index into FEATURE_NAMES
    contributions: np.ndarray   # (K, rows, cols)
    prior: np.ndarray           # (rows, cols)


@dataclass
class TrainedModel:
    regime: RegimeParams
    attention: AttentionParams
    gbm: GbmParams
    loss_trace: np.ndarray
    xi: np.ndarray
    alpha: np.ndarray
    delta_res: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    config: TrainConfig = field(default_factory=TrainConfig)

    @property
    def params(self) -> Params:
        return Params(self.regime, self.attention, self.gbm)


def reconstruct(state: SceneState, params: Params, overrides: Overrides = Overrides()) -> SceneResult:
    """Maps and reconstruction for ``params`` on a prepared scene."""
    fwd = _forward(state, params, overrides)
    rows, cols = state.rows, state.cols
    contrib, dominant = feature_contributions(state.F, params.regime)
    return SceneResult(
        xi=maps_from_pixels(fwd["xi"], rows, cols),
        alpha=maps_from_pixels(fwd["alpha"], rows, cols),
        y_hat=maps_from_pixels(fwd["Y_hat"], rows, cols),
        s_lin=maps_from_pixels(state.S, rows, cols),
        delta_res=maps_from_pixels(fwd["gain"], rows, cols),
        abundances=maps_from_pixels(state.A, rows, cols),
        dominant_feature=maps_from_pixels(dominant, rows, cols),
        contributions=maps_from_pixels(contrib, rows, cols),
        prior=maps_from_pixels(state.prior, rows, cols),
    )


def train(cube: Cube, E, config: TrainConfig = None, abundances=None,
          state: Optional[SceneState] = None) -> TrainedModel:
    """Fit gate, attention and GBM parameters on one scene without regime labels."""
    config = TrainConfig() if config is None else config
    if state is None:
        state = prepare_scene(cube, E, config, abundances)
    params, trace = optimize(state, config)
    res = reconstruct(state, params)
    log.info("trained %d epochs: loss %.6g -> %.6g", config.epochs, trace[0], trace[-1])
    return TrainedModel(params.regime, params.attention, params.gbm, trace, res.xi, res.alpha,
                        res.delta_res, state.feature_mean, state.feature_std, config)


def predict(cube: Cube, E, model: TrainedModel, abundances=None,
            state: Optional[SceneState] = None) -> SceneResult:
    """Apply a trained model to ``cube``; features use the training standardization."""
    E = as_spectra(E)
    if state is None:
        state = prepare_scene(cube, E, model.config, abundances,
                              feature_stats=(model.feature_mean, model.feature_std))
    if state.K != model.regime.w.size or state.P != model.gbm.raw.size:
        raise ValueError("model dimensions do not match the scene")
    return reconstruct(state, model.params)


def fit_uniform_baseline(state: SceneState, method: str, config: TrainConfig) -> SceneResult:
    """Reconstruct with one model applied everywhere (``xi = 1``).

    ``lmm`` is the linear mixture alone. For ``gbm`` the interaction
    strengths are fitted with the same optimizer while the gate is frozen;
    ``ppnm`` and ``hapke`` have no free parameters here.
    """
    method = method.lower()
    params = Params.initial(state.K, state.P, config.tau)
    if method == "lmm":
        return reconstruct(state, params, Overrides(xi=0.0, model=GBM))
    if method not in MODEL_NAMES:
        raise ValueError(f"unknown method {method!r}")
    overrides = Overrides(xi=1.0, model=MODEL_NAMES.index(method))
    if method == "gbm":
        params, _ = optimize(state, config, overrides)
    return reconstruct(state, params, overrides)


def expand_config(config: TrainConfig, **changes) -> TrainConfig:
    data = config.as_dict()
    data.update(changes)
    return TrainConfig(**data)
