import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from regimix.metrics import (
    RRMSE_DEFINITION, coherence_rho, rmse, rrmse, sad, sad_per_pixel, scene_metrics, spectral_angle,
)

vec = st.lists(st.floats(-10, 10), min_size=4, max_size=4).map(np.array)


def test_sad_examples(rng):
    y = rng.uniform(0.1, 1, size=6)
    assert spectral_angle(y, 3.0 * y) == pytest.approx(0.0, abs=1e-7)
    assert spectral_angle([1, 0], [0, 1]) == pytest.approx(math.pi / 2, rel=1e-15)
    assert spectral_angle([1, 0], [1, 1]) == pytest.approx(math.acos(1 / math.sqrt(2)), rel=1e-15)


def test_sad_masks_zero_pixels():
    y = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    yh = np.array([[0.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    res = sad(y, yh, full_output=True)
    assert res.masked == 1
    assert res.value == pytest.approx((math.pi / 2 + math.pi / 4) / 2, rel=1e-15)
    assert np.isnan(sad_per_pixel(y, yh)[1])
    with pytest.raises(ValueError):
        sad(np.zeros((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        spectral_angle([0, 0], [1, 1])


def test_sad_on_cubes_matches_pixel_layout(rng):
    y = rng.uniform(0.1, 1, size=(5, 3, 4))
    yh = rng.uniform(0.1, 1, size=(5, 3, 4))
    flat = [spectral_angle(y[:, r, c], yh[:, r, c]) for r in range(3) for c in range(4)]
    assert sad(y, yh) == pytest.approx(np.mean(flat), rel=1e-14)


@settings(max_examples=80)
@given(vec, vec, st.floats(0.01, 100), st.floats(0.01, 100))
def test_sad_symmetric_and_scale_invariant(a, b, s, t):
    assume(np.linalg.norm(a) > 1e-3 and np.linalg.norm(b) > 1e-3)
    assert spectral_angle(a, b) == pytest.approx(spectral_angle(b, a), abs=1e-12)
    assert spectral_angle(s * a, t * b) == pytest.approx(spectral_angle(a, b), abs=1e-6)
    assert 0 <= spectral_angle(a, b) <= math.pi


def test_rmse_examples(rng):
    y = rng.uniform(size=(4, 5, 6))
    assert rmse(y, y) == 0.0
    assert rmse(y, y + 0.03) == pytest.approx(0.03, rel=1e-12)
    yh = rng.uniform(size=(4, 5, 6))
    assert rmse(y, yh) == pytest.approx(math.sqrt(sum((a - b) ** 2 for a, b in zip(y.ravel(), yh.ravel())) / y.size))
    with pytest.raises(ValueError):
        rmse(y, y[:, :4])


def test_rrmse_examples(rng):
    y = rng.uniform(0.1, 1, size=(6, 4, 4))
    assert rrmse(y, y) == 0.0
    assert rrmse(y, 0.9 * y) == pytest.approx(0.1, rel=1e-12)
    y[:, 0, 0] = 0.0
    res = rrmse(y, 0.9 * y, full_output=True)
    assert res.masked == 1 and res.value == pytest.approx(0.1, rel=1e-12)
    with pytest.raises(ValueError):
        rrmse(np.zeros((3, 2)), np.ones((3, 2)))
    assert "mean over pixels" in RRMSE_DEFINITION


def test_rho_examples(rng):
    xi = rng.uniform(size=(6, 6))
    assert coherence_rho(xi, 2 * xi + 1) == pytest.approx(1.0, abs=1e-15)
    assert coherence_rho(xi, -xi) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(ValueError, match="correlation undefined"):
        coherence_rho(np.full((6, 6), 0.3), xi)
    with pytest.raises(ValueError):
        coherence_rho(xi, xi[:3])


@settings(max_examples=60)
@given(st.integers(0, 2**16), st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 10), st.floats(-5, 5))
def test_rho_affine_invariant(seed, s, t, u, v):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=30), r.normal(size=30)
    assert coherence_rho(s * a + t, u * b + v) == pytest.approx(coherence_rho(a, b), abs=1e-9)
    assert -1 <= coherence_rho(a, b) <= 1


def test_scene_metrics_bundle(rng):
    y = rng.uniform(0.1, 1, size=(5, 3, 3))
    m = scene_metrics(y, y)
    assert m.rmse == 0.0 and m.rrmse == 0.0 and math.isnan(m.rho)
    m = scene_metrics(y, 0.9 * y, xi_map=y[0], gain_map=y[0])
    assert m.rho == pytest.approx(1.0)
