import dataclasses
import math

import numpy as np
import pytest

from regimix import regime, synth
from regimix.features import FEATURE_NAMES
from regimix.models import MODEL_NAMES, AttentionParams, GbmParams, attention_weights, sigmoid
from regimix.regime import (
    NumericalError, Overrides, Params, RegimeParams, TrainConfig, anneal_lambda_feat,
    feature_contributions, laplacian_penalty, laplacian_penalty_grad, loss_and_grad,
    loss_terms, optimize, predict, prepare_scene, reconstruction_gain, total_loss, train,
)

ZERO = dict(lambda_feat0=0.0, lambda_feat_final=0.0, lambda_sp=0.0, lambda_w=0.0, lambda_ent=0.0)


def random_params(state, r, scale=0.5):
    theta = r.normal(0, scale, size=Params.initial(state.K, state.P).flat().size)
    return Params.from_flat(theta, state.K, state.P)


def tiny_state(seed, rows=4, cols=4, bands=8, layout="half-split"):
    sc = synth.generate_scene(synth.SynthSpec(rows=rows, cols=cols, bands=bands, seed=seed, layout=layout))
    return prepare_scene(sc.cube, sc.endmembers, TrainConfig())


def silence(state):
    """Same scene with every nonlinear residual forced to zero."""
    z = np.zeros_like(state.D_ppnm)
    return dataclasses.replace(state, D_ppnm=z, D_hapke=z, pair_s=np.zeros_like(state.pair_s))


def fd_gradient(state, params, lam, config, overrides=Overrides(), h=1e-6):
    theta = params.flat()
    out = np.zeros_like(theta)
    for j in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        f = lambda t: total_loss(state, Params.from_flat(t, state.K, state.P, config.tau), lam, config, overrides)
        out[j] = (f(up) - f(dn)) / (2 * h)
    return out


def straight_line_loss(state, params, lam, cfg):
    """Pixel-by-pixel loop over the objective, sharing no code with the vectorized path."""
    N, rows, cols = state.N, state.rows, state.cols
    gamma = [1 / (1 + math.exp(-r)) for r in params.gbm.raw]
    xis, total = [], 0.0
    for i in range(N):
        z = sum(params.regime.w[k] * state.F[i, k] for k in range(state.K)) + params.regime.b
        x = 1 / (1 + math.exp(-z))
        xis.append(x)
        logits = [(sum(params.attention.u[m, k] * state.F[i, k] for k in range(state.K))
                   + params.attention.c[m]) / params.attention.tau for m in range(3)]
        mx = max(logits)
        ex = [math.exp(l - mx) for l in logits]
        alpha = [e / sum(ex) for e in ex]
        lin_err = fit_err = 0.0
        for band in range(state.Y.shape[1]):
            gbm = sum(gamma[p] * state.pair_a[i, p] * state.pair_s[band, p] for p in range(state.P))
            d = alpha[0] * gbm + alpha[1] * state.D_ppnm[i, band] + alpha[2] * state.D_hapke[i, band]
            yhat = state.S[i, band] + x * d
            lin_err += (state.Y[i, band] - state.S[i, band]) ** 2
            fit_err += (state.Y[i, band] - yhat) ** 2
        gain = math.sqrt(lin_err) - math.sqrt(fit_err)
        total += -math.tanh(gain) + lam * (x - state.prior[i]) ** 2
        total += cfg.lambda_ent * -sum(a * math.log(a) for a in alpha if a > 0)
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                total += cfg.lambda_sp * (xis[r * cols + c] - xis[r * cols + c + 1]) ** 2
            if r + 1 < rows:
                total += cfg.lambda_sp * (xis[r * cols + c] - xis[(r + 1) * cols + c]) ** 2
    total += cfg.lambda_w * sum(v * v for v in params.regime.w)
    return total


def total_variation(m):
    return float(np.abs(np.diff(m, axis=0)).sum() + np.abs(np.diff(m, axis=1)).sum())


# --- per-pixel building blocks ------------------------------------------------------

def test_xi_examples():
    p = RegimeParams(np.zeros(6), 0.0)
    assert regime.xi(np.ones(6), p) == 0.5
    p = RegimeParams(np.array([1.0, 0, 0, 0, 0, 0]), 0.5)
    assert regime.xi([0.5, 9, 9, 9, 9, 9], p) == pytest.approx(1 / (1 + math.exp(-1)), rel=1e-15)
    hi = regime.xi(np.zeros(6), RegimeParams(np.zeros(6), 50.0))
    lo = regime.xi(np.zeros(6), RegimeParams(np.zeros(6), -50.0))
    assert abs(hi - 1) <= 1e-15 and 0 <= lo <= 1e-15


def test_regime_params_finite():
    with pytest.raises(ValueError):
        RegimeParams(np.array([np.inf, 0, 0, 0, 0, 0]))


def test_feature_contributions(rng):
    p = RegimeParams(np.eye(6)[0], 0.3)
    F = rng.normal(size=(10, 6))
    contrib, dominant = feature_contributions(F, p)
    assert np.all(contrib[:, 1:] == 0) and np.all(dominant[F[:, 0] != 0] == 0)
    p = RegimeParams(rng.normal(size=6), -0.2)
    contrib, dominant = feature_contributions(F, p)
    np.testing.assert_allclose(contrib, F * p.w[None, :], rtol=0)
    np.testing.assert_allclose(sigmoid(contrib.sum(axis=1) + p.b), regime.xi(F, p), rtol=1e-14)
    np.testing.assert_array_equal(dominant, np.abs(F * p.w).argmax(axis=1))
    _, tie = feature_contributions(np.ones(6), RegimeParams(np.ones(6)))
    assert tie == 0


def test_reconstruction_gain(rng):
    y, s = rng.uniform(size=8), rng.uniform(size=8)
    assert reconstruction_gain(y, s, s) == 0.0
    assert reconstruction_gain(y, s, y) == pytest.approx(np.linalg.norm(y - s)) and np.linalg.norm(y - s) > 0
    yh = rng.uniform(size=8)
    expected = math.sqrt(sum((a - b) ** 2 for a, b in zip(y, s))) - math.sqrt(sum((a - b) ** 2 for a, b in zip(y, yh)))
    assert reconstruction_gain(y, s, yh) == pytest.approx(expected, rel=1e-13)


def test_laplacian_examples():
    assert laplacian_penalty(np.full((3, 4), 0.7)) == 0.0
    assert laplacian_penalty([[0.0, 1.0]]) == 1.0
    assert laplacian_penalty([[0.0, 1.0], [1.0, 0.0]]) == 4.0


def test_laplacian_grad_matches_fd(rng):
    x = rng.uniform(size=(4, 5))
    g = laplacian_penalty_grad(x)
    h = 1e-6
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += h
        dn[idx] -= h
        assert g[idx] == pytest.approx((laplacian_penalty(up) - laplacian_penalty(dn)) / (2 * h), abs=1e-7)


def test_anneal_schedule():
    cfg = TrainConfig(epochs=11, lambda_feat0=1.0, lambda_feat_final=0.1)
    assert anneal_lambda_feat(0, cfg) == 1.0
    assert anneal_lambda_feat(10, cfg) == pytest.approx(0.1, abs=1e-15)
    assert anneal_lambda_feat(5, cfg) == pytest.approx(0.55, abs=1e-15)
    with pytest.raises(ValueError):
        anneal_lambda_feat(11, cfg)
    assert anneal_lambda_feat(0, TrainConfig(epochs=1)) == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_sp=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(mu0=0.0)


def test_params_flat_round_trip(small_state, rng):
    p = random_params(small_state, rng)
    q = Params.from_flat(p.flat(), small_state.K, small_state.P)
    np.testing.assert_array_equal(q.flat(), p.flat())
    sl = Params.slices(small_state.K, small_state.P)
    assert sl["gamma_raw"].stop == p.flat().size == 6 + 1 + 18 + 3 + 3
    with pytest.raises(ValueError):
        Params.from_flat(np.zeros(5), small_state.K, small_state.P)


# --- objective --------------------------------------------------------------------

def test_loss_closed_form_at_prior():
    state = silence(tiny_state(1))
    state = dataclasses.replace(state, prior=np.full(state.N, 0.5))
    cfg = TrainConfig(lambda_sp=0.3, lambda_w=0.2)
    loss = total_loss(state, Params.initial(state.K, state.P), 1.0, cfg)
    assert loss == pytest.approx(state.N * cfg.lambda_ent * math.log(3), rel=1e-14)


def test_loss_with_all_lambdas_zero(small_state, rng):
    cfg = TrainConfig(**ZERO)
    p = random_params(small_state, rng)
    fwd = regime._forward(small_state, p)
    assert total_loss(small_state, p, 0.0, cfg) == pytest.approx(-np.tanh(fwd["gain"]).sum(), rel=1e-14)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_matches_straight_line_version(seed):
    state = tiny_state(seed)
    r = np.random.default_rng(seed)
    p = random_params(state, r)
    p.attention.tau = 0.7
    cfg = TrainConfig(lambda_sp=0.05, lambda_w=0.02, lambda_ent=0.03)
    assert total_loss(state, p, 0.4, cfg) == pytest.approx(straight_line_loss(state, p, 0.4, cfg), rel=1e-12)


@pytest.mark.parametrize("term,field", [
    ("prior", None), ("spatial", "lambda_sp"), ("weight_decay", "lambda_w"), ("entropy", "lambda_ent"),
])
def test_term_isolation(small_state, rng, term, field):
    p = random_params(small_state, rng)
    base = TrainConfig(**ZERO)
    lam = 0.0
    if field is None:
        lam = 0.7
    else:
        base = dataclasses.replace(base, **{field: 0.7})
    recon = total_loss(small_state, p, 0.0, TrainConfig(**ZERO))
    fwd = regime._forward(small_state, p)
    standalone = {
        "prior": 0.7 * np.sum((fwd["xi"] - small_state.prior) ** 2),
        "spatial": 0.7 * laplacian_penalty(fwd["xi"].reshape(small_state.rows, small_state.cols)),
        "weight_decay": 0.7 * float(p.regime.w @ p.regime.w),
        "entropy": 0.7 * float(-np.sum(fwd["alpha"] * np.log(fwd["alpha"]))),
    }[term]
    got = total_loss(small_state, p, lam, base) - recon
    assert got == pytest.approx(standalone, rel=1e-10)
    assert loss_terms(small_state, p, lam, base)[term] == pytest.approx(standalone, rel=1e-13)


# --- gradient ----------------------------------------------------------------------

def rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    state = tiny_state(seed)
    r = np.random.default_rng(100 + seed)
    p = random_params(state, r)
    cfg = TrainConfig(lambda_sp=0.1, lambda_w=0.05, lambda_ent=0.05, tau=0.8)
    p.attention.tau = cfg.tau
    _, g, _ = loss_and_grad(state, p, 0.6, cfg)
    assert rel_err(g, fd_gradient(state, p, 0.6, cfg)).max() < 1e-5


@pytest.mark.parametrize("overrides", [Overrides(xi=1.0, model=0), Overrides(xi=0.3), Overrides(model=2)])
def test_gradient_with_frozen_parts(overrides):
    state = tiny_state(7)
    p = random_params(state, np.random.default_rng(7))
    cfg = TrainConfig()
    _, g, _ = loss_and_grad(state, p, 0.5, cfg, overrides)
    assert rel_err(g, fd_gradient(state, p, 0.5, cfg, overrides)).max() < 1e-5
    sl = Params.slices(state.K, state.P)
    if overrides.xi is not None:
        np.testing.assert_array_equal(g[sl["w"]], 2 * cfg.lambda_w * p.regime.w)
        assert g[sl["b"]] == 0
    if overrides.model is not None:
        assert np.all(g[sl["u"]] == 0) and np.all(g[sl["c"]] == 0)


def test_dead_path_zero_w_gradient(rng):
    state = silence(tiny_state(3))
    p = random_params(state, rng)
    _, g, _ = loss_and_grad(state, p, 0.0, TrainConfig(**ZERO))
    np.testing.assert_array_equal(g[Params.slices(state.K, state.P)["w"]], 0.0)


def test_weight_decay_gradient_linear(rng):
    state = tiny_state(4)
    p = random_params(state, rng)
    sl = Params.slices(state.K, state.P)["w"]
    g0 = loss_and_grad(state, p, 0.5, TrainConfig(lambda_w=0.0))[1][sl]
    g1 = loss_and_grad(state, p, 0.5, TrainConfig(lambda_w=0.1))[1][sl]
    g2 = loss_and_grad(state, p, 0.5, TrainConfig(lambda_w=0.2))[1][sl]
    np.testing.assert_allclose(g2 - g0, 2 * (g1 - g0), rtol=1e-10)
    np.testing.assert_allclose(g1 - g0, 0.2 * p.regime.w, rtol=1e-10)


def test_non_finite_term_names_pixel(small_state):
    bad = dataclasses.replace(small_state, prior=small_state.prior.copy())
    bad.prior[5] = np.nan
    with pytest.raises(NumericalError, match="prior.*pixel 5"):
        total_loss(bad, Params.initial(bad.K, bad.P), 1.0, TrainConfig())
    with pytest.raises(NumericalError, match="epoch 0"):
        optimize(bad, TrainConfig(epochs=2))


# --- training ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_small(small_scene):
    cfg = TrainConfig(epochs=150)
    state = prepare_scene(small_scene.cube, small_scene.endmembers, cfg)
    return state, train(small_scene.cube, small_scene.endmembers, cfg, state=state)


def test_training_is_deterministic(small_scene, small_state, trained_small):
    _, model = trained_small
    again = train(small_scene.cube, small_scene.endmembers, TrainConfig(epochs=150), state=small_state)
    assert again.params.flat().tobytes() == model.params.flat().tobytes()
    assert again.loss_trace.tobytes() == model.loss_trace.tobytes()


def test_training_decreases_loss(trained_small):
    _, model = trained_small
    assert np.all(np.isfinite(model.loss_trace))
    assert model.loss_trace[-1] < model.loss_trace[0]
    assert np.all((model.xi > 0) & (model.xi < 1))


def test_initial_state_is_maximum_entropy(small_state):
    p = Params.initial(small_state.K, small_state.P)
    res = regime.reconstruct(small_state, p)
    np.testing.assert_array_equal(res.xi, 0.5)
    np.testing.assert_allclose(res.alpha, 1 / 3, rtol=1e-15)
    np.testing.assert_array_equal(p.gbm.gamma, 0.5)


def test_predict_outputs(small_scene, trained_small):
    state, model = trained_small
    res = predict(small_scene.cube, small_scene.endmembers, model)
    assert np.all((res.xi > 0) & (res.xi < 1))
    np.testing.assert_allclose(res.alpha.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_array_equal(res.xi, model.xi)
    y = small_scene.cube.data.clip(0, 1)
    for r, c in [(0, 0), (3, 9), (15, 15)]:
        assert res.delta_res[r, c] == pytest.approx(
            reconstruction_gain(y[:, r, c], res.s_lin[:, r, c], res.y_hat[:, r, c]), abs=1e-14)
    assert set(np.unique(res.dominant_feature)) <= set(range(len(FEATURE_NAMES)))
    assert res.abundances.shape == (3, 16, 16)


def test_predict_with_closed_gate_is_linear(small_state, trained_small):
    _, model = trained_small
    p = model.params
    p.regime = RegimeParams(np.zeros(small_state.K), -800.0)
    res = regime.reconstruct(small_state, p)
    np.testing.assert_allclose(res.y_hat, res.s_lin, atol=1e-12)


def test_predict_dimension_mismatch(trained_small):
    _, model = trained_small
    other = synth.generate_scene(synth.SynthSpec(rows=8, cols=8, bands=20, M=4, seed=1))
    with pytest.raises(ValueError):
        predict(other.cube, other.endmembers, model)


def test_prior_limit_reached_when_representable():
    state = silence(tiny_state(11, rows=10, cols=10, bands=12))
    r = np.random.default_rng(11)
    target = sigmoid(state.F @ r.normal(0, 0.5, state.K) - 0.2)
    state = dataclasses.replace(state, prior=target)
    cfg = TrainConfig(lambda_feat0=1e6, lambda_feat_final=1e6, lambda_sp=0, lambda_w=0, lambda_ent=0,
                      epochs=1500, learning_rate=0.05)
    p, _ = optimize(state, cfg)
    assert np.abs(regime.xi(state.F, p.regime) - target).max() < 1e-3


def test_prior_limit_reaches_least_squares_fit():
    from scipy.optimize import least_squares

    state = silence(tiny_state(12, rows=10, cols=10, bands=12))
    cfg = TrainConfig(lambda_feat0=1e6, lambda_feat_final=1e6, lambda_sp=0, lambda_w=0, lambda_ent=0,
                      epochs=1500, learning_rate=0.05)
    p, _ = optimize(state, cfg)
    fit = least_squares(lambda t: sigmoid(state.F @ t[:-1] + t[-1]) - state.prior,
                        np.zeros(state.K + 1), xtol=1e-15, ftol=1e-15, gtol=1e-15)
    best = sigmoid(state.F @ fit.x[:-1] + fit.x[-1])
    assert np.abs(regime.xi(state.F, p.regime) - best).max() < 1e-3


def test_low_temperature_gives_one_hot(small_state, rng):
    u = rng.normal(size=(3, small_state.K))
    c = rng.normal(size=3)
    alpha = attention_weights(small_state.F, AttentionParams(u, c, 1e-3))
    logits = np.sort(small_state.F @ u.T + c, axis=1)
    clear = logits[:, -1] - logits[:, -2] > 0.04
    assert clear.mean() > 0.5
    np.testing.assert_allclose(alpha[clear].max(axis=1), 1.0, atol=1e-12)


@pytest.mark.slow
def test_spatial_weight_smooths_regime_map():
    sc = synth.generate_scene(synth.SynthSpec(rows=24, cols=24, bands=20, seed=2))
    state = prepare_scene(sc.cube, sc.endmembers, TrainConfig())
    tv = []
    for lam in (0.0, 0.01, 0.1):
        cfg = TrainConfig(lambda_sp=lam, epochs=300)
        p, _ = optimize(state, cfg)
        tv.append(total_variation(regime.reconstruct(state, p).xi))
    assert tv[0] >= tv[1] >= tv[2]


@pytest.mark.slow
def test_nonlinear_half_gets_larger_xi():
    sc = synth.generate_scene(synth.SynthSpec(rows=24, cols=24, bands=20, seed=2))
    model = train(sc.cube, sc.endmembers, TrainConfig(epochs=300))
    assert model.xi[sc.labels == 1].mean() > model.xi[sc.labels == 0].mean()
