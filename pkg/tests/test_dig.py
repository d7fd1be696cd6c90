import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gainfuse.dig import (DIGConfig, DIGTrace, dig, dig_curves, distance, noisy_modality, one_step_denoised,
                          patch_sum, record_steps, softmax, weights_from_dig)
from gainfuse.oracles import EmpiricalDataOracle, ZeroDenoiser
from gainfuse.schedule import NoiseSchedule, make_linear_schedule, sub_schedule

S = make_linear_schedule()
GLOBAL = DIGConfig(patch_grid=None)


class InjectedNoiseDenoiser:
    """Returns the noise that produced x_t from a known clean image."""

    def __init__(self, clean, s):
        self.clean, self.s = clean, s

    def predict_eps(self, x_t, t):
        ab = self.s.abar(t)
        return (x_t - np.sqrt(ab) * self.clean) / np.sqrt(1 - ab)


def test_noisy_modality_zero_eps(rng):
    c = rng.standard_normal((4, 4))
    np.testing.assert_array_equal(noisy_modality(c, 30, np.zeros_like(c), S), np.sqrt(S.abar(30)) * c)


def test_noisiest_step_decorrelates(rng):
    c = rng.standard_normal((64, 64))
    corr = [np.corrcoef(c.ravel(), noisy_modality(c, S.T, rng.standard_normal(c.shape), S).ravel())[0, 1]
            for _ in range(20)]
    assert abs(np.mean(corr)) < 0.1


def test_shared_eps_bit_identical(rng):
    c, eps = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
    assert noisy_modality(c, 9, eps, S).tobytes() == noisy_modality(c, 9, eps, S).tobytes()


def test_perfect_denoiser_recovers_modality(rng):
    c = rng.standard_normal((6, 6))
    d = InjectedNoiseDenoiser(c, S)
    for t in (1, 100, 900):
        np.testing.assert_allclose(one_step_denoised(noisy_modality(c, t, rng.standard_normal(c.shape), S), t, d, S),
                                   c, atol=1e-12)


def test_zero_denoiser_rescales(rng):
    x = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(one_step_denoised(x, 77, ZeroDenoiser(), S), x / np.sqrt(S.abar(77)))


def test_empirical_reconstruction_converges_near_data(rng):
    # a nearby second atom keeps the posterior undecided until the last steps
    c = rng.uniform(-1, 1, (8, 8))
    d = EmpiricalDataOracle([c, c + 0.01 * rng.standard_normal(c.shape)], S)
    eps = rng.standard_normal(c.shape)
    errs = [np.abs(one_step_denoised(noisy_modality(c, t, eps, S), t, d, S) - c).max() for t in range(10, 0, -1)]
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-6


def test_perfect_denoiser_dig_zero(rng):
    c = np.zeros((8, 8))
    d = InjectedNoiseDenoiser(c, S)
    cfg = DIGConfig(patch_grid=(2, 2))
    for t in (11, 500, 1000):
        assert np.all(dig(c, t, d, S, cfg, rng=rng) == 0.0)
    c = rng.standard_normal((8, 8))
    d = InjectedNoiseDenoiser(c, S)
    assert np.max(np.abs(dig(c, 500, d, S, cfg, rng=rng))) < 1e-24


def test_zero_denoiser_scalar_hand_value():
    c, e, t, lo = np.array([[1.0]]), np.array([[0.7]]), 300, 290
    ab_t, ab_lo = S.abar(t), S.abar(lo)
    hi = (math.sqrt(ab_t) * 1.0 + math.sqrt(1 - ab_t) * 0.7) / math.sqrt(ab_t)
    low = (math.sqrt(ab_lo) * 1.0 + math.sqrt(1 - ab_lo) * 0.7) / math.sqrt(ab_lo)
    expected = (hi - 1.0) ** 2 - (low - 1.0) ** 2
    got = dig(c, t, ZeroDenoiser(), S, GLOBAL, eps=e)
    assert got == pytest.approx(expected, rel=1e-12)


def test_degenerate_window_has_zero_mean_gain():
    base = make_linear_schedule(20)
    # steps 10 and 20 share one noise level
    alpha = base.alpha.copy()
    alpha[10:] = 1.0
    abar = np.cumprod(alpha)
    s = NoiseSchedule(1 - alpha, alpha, abar, np.zeros(20))
    c = np.random.default_rng(1).standard_normal((4, 4))
    shared = DIGConfig(patch_grid=None, interval_S=10)
    assert dig(c, 20, ZeroDenoiser(), s, shared, rng=np.random.default_rng(2)) == 0.0
    indep = DIGConfig(patch_grid=None, interval_S=10, shared_noise=False)
    r = np.random.default_rng(3)
    vals = np.array([dig(c, 20, ZeroDenoiser(), s, indep, rng=r) for _ in range(1000)])
    assert abs(vals.mean()) < 4 * vals.std(ddof=1) / np.sqrt(vals.size)


def test_window_must_stay_above_step_zero(rng):
    c = np.zeros((2, 2))
    with pytest.raises(ValueError):
        dig(c, 5, ZeroDenoiser(), S, DIGConfig(interval_S=5), rng=rng)
    with pytest.raises(ValueError):
        dig(c, 5, ZeroDenoiser(), S, DIGConfig(), rng=rng, t_low=5)
    with pytest.raises(ValueError):
        dig(c, 20, ZeroDenoiser(), S, DIGConfig())


def test_s1_telescoping(rng):
    s = make_linear_schedule(30, 1e-3, 0.1)
    c = rng.standard_normal((8, 8))
    d = EmpiricalDataOracle([c, rng.standard_normal((8, 8))], s)
    eps = rng.standard_normal(c.shape)
    cfg = DIGConfig(interval_S=1, patch_grid=(2, 2))
    total = sum(dig(c, t, d, s, cfg, eps=eps) for t in range(30, 1, -1))
    ends = [distance(one_step_denoised(noisy_modality(c, t, eps, s), t, d, s), c, cfg) for t in (30, 1)]
    np.testing.assert_allclose(total, ends[0] - ends[1], atol=1e-10)


def test_softmax_of_constants():
    np.testing.assert_allclose(weights_from_dig([3.0, 3.0, 3.0], GLOBAL).values, 1 / 3, rtol=1e-15)


def test_closed_form_softmax():
    w = weights_from_dig([math.log(2.0), 0.0], GLOBAL).values
    np.testing.assert_allclose(w, [2 / 3, 1 / 3], rtol=1e-15)


def test_shift_invariance(rng):
    g = rng.standard_normal(4)
    a = weights_from_dig(g, GLOBAL).values
    b = weights_from_dig(g + 17.0, GLOBAL).values
    assert np.max(np.abs(a - b)) <= 1e-15


def test_softmax_is_overflow_safe():
    np.testing.assert_allclose(softmax(np.array([1e5, 0.0])), [1.0, 0.0])


def test_temperature_and_auto_scale():
    g = np.array([2.0, 0.0])
    hot = weights_from_dig(g, DIGConfig(patch_grid=None, temperature=4.0)).values
    np.testing.assert_allclose(hot, softmax(g / 4.0))
    scaled = weights_from_dig(1e6 * g, DIGConfig(patch_grid=None, auto_scale=True)).values
    np.testing.assert_allclose(scaled, softmax(np.array([2.0, 0.0])))


def test_patch_weights_need_shape():
    with pytest.raises(ValueError):
        weights_from_dig(np.zeros((2, 2, 2)), DIGConfig(patch_grid=(2, 2)))
    w = weights_from_dig(np.zeros((2, 2, 2)), DIGConfig(patch_grid=(2, 2)), shape=(6, 6))
    assert w.mode == "patchwise" and w.values.shape == (2, 6, 6) and w.patch_values.shape == (2, 2, 2)


def test_patch_sum_with_edge_padding():
    x = np.arange(9.0).reshape(3, 3)
    # 2x2 grid on a 3x3 image pads to 4x4 by repeating the last row and column
    np.testing.assert_array_equal(patch_sum(x, (2, 2)), np.array([[8.0, 14.0], [26.0, 32.0]]))
    assert patch_sum(x, None) == 36.0


def test_distances():
    a, b = np.zeros((4, 4)), np.ones((4, 4))
    assert distance(a, b, DIGConfig(distance="l2", patch_grid=None)) == 16.0
    assert distance(a, 2 * b, DIGConfig(distance="l1", patch_grid=None)) == 32.0
    assert distance(b, b, DIGConfig(distance="ssim", patch_grid=None)) == pytest.approx(0.0, abs=1e-12)


def test_config_validation():
    for bad in (dict(distance="l3"), dict(interval_S=0), dict(patch_grid=(0, 2)), dict(temperature=0.0)):
        with pytest.raises(ValueError):
            DIGConfig(**bad)


def test_trace_csv(tmp_path):
    tr = DIGTrace(("a", "b"))
    tr.append(100, np.zeros((2, 2, 2)), np.full((2, 2, 2), 0.5))
    tr.append(90, np.ones((2, 2, 2)), np.full((2, 2, 2), 0.5))
    tr.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "# schema: dig-trace v1"
    assert len(lines) == 2 + 2 * 2 * 4
    np.testing.assert_array_equal(tr.cumulative()[-1], 1.0)


def test_dig_curves_shape_and_seeding():
    rs = sub_schedule(S, list(range(40, 1001, 40)))
    imgs = [np.random.default_rng(k).standard_normal((8, 8, 1)) for k in range(2)]
    cfg = DIGConfig(patch_grid=(2, 2))
    a = dig_curves(imgs, ZeroDenoiser(), rs, cfg, seed=1, n_seeds=3)
    assert a.shape == (3, 3, 2, 2, 2)
    np.testing.assert_array_equal(a, dig_curves(imgs, ZeroDenoiser(), rs, cfg, seed=1, n_seeds=3))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.integers(1, 50))
def test_record_count(N, S_):
    assert len(record_steps(N, S_)) == math.ceil(N / S_)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 2, 2), elements=st.floats(-50, 50)), st.floats(0.05, 20))
def test_weights_on_simplex(g, tau):
    w = weights_from_dig(g, DIGConfig(patch_grid=(2, 2), temperature=tau), shape=(5, 7))
    assert np.all(w.values >= 0) and np.all(w.patch_values >= 0)
    assert np.max(np.abs(w.values.sum(axis=0) - 1)) <= 1e-12
    assert np.max(np.abs(w.patch_values.sum(axis=0) - 1)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-30, 30)), st.floats(-1e3, 1e3))
def test_shift_invariance_property(g, shift):
    a = weights_from_dig(g, GLOBAL).values
    b = weights_from_dig(g + shift, GLOBAL).values
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.01, 5))
def test_weight_monotone_in_own_gain(d1, d2, step):
    w_lo = weights_from_dig([d1, d2], GLOBAL).values[0]
    w_hi = weights_from_dig([d1 + step, d2], GLOBAL).values[0]
    assert w_hi > w_lo or w_lo == 1.0
