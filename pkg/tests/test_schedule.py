import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gainfuse.schedule import ScheduleError, from_betas, make_linear_schedule, sub_schedule

# exact rational product of (1 - beta_i) over the default linear ramp
ABAR_1000 = 4.0358297653756835e-05
ABAR_500 = 0.07858724288177824


def test_two_step_product():
    s = make_linear_schedule(2, 0.5, 0.5)
    np.testing.assert_array_equal(s.beta, [0.5, 0.5])
    np.testing.assert_array_equal(s.alpha, [0.5, 0.5])
    np.testing.assert_array_equal(s.alpha_bar, [0.5, 0.25])


def test_single_step_has_no_noise():
    s = make_linear_schedule(1, 0.1, 0.1)
    np.testing.assert_array_equal(s.sigma, [0.0])


def test_default_alpha_bar_matches_exact_product(linear):
    assert linear.T == 1000
    assert linear.abar(1000) == pytest.approx(ABAR_1000, rel=1e-12)
    assert linear.abar(500) == pytest.approx(ABAR_500, rel=1e-12)


def test_abar_zero_is_one(linear):
    assert linear.abar(0) == 1.0


def test_sigma_is_posterior_std(linear):
    t = 37
    ab, ab_prev, b = linear.abar(t), linear.abar(t - 1), linear.beta[t - 1]
    assert linear.sig(t) == pytest.approx(np.sqrt(b * (1 - ab_prev) / (1 - ab)), rel=1e-14)


def test_identity_respacing_is_unchanged():
    s = make_linear_schedule(50)
    r = sub_schedule(s, range(1, 51))
    for name in ("beta", "alpha", "alpha_bar", "sigma", "timesteps"):
        np.testing.assert_array_equal(getattr(r, name), getattr(s, name))


def test_respacing_keeps_selected_alpha_bar():
    s = make_linear_schedule(4, 0.1, 0.4)
    r = sub_schedule(s, [2, 4])
    np.testing.assert_array_equal(r.alpha_bar, [s.abar(2), s.abar(4)])
    assert r.model_timestep(1) == 2 and r.model_timestep(2) == 4


def test_geometric_respacing_ratio_oracle(linear):
    steps = np.unique(np.round(np.geomspace(1, 1000, 25)).astype(int))
    r = sub_schedule(linear, steps)
    for i, t in enumerate(steps):
        prev = 1.0 if i == 0 else np.prod(1 - linear.beta[: steps[i - 1]])
        ratio = np.prod(1 - linear.beta[:t]) / prev
        assert r.alpha[i] == pytest.approx(ratio, rel=1e-12)


@pytest.mark.parametrize("bad", [[0.0, 0.1], [0.1, 1.0], [], [np.nan]])
def test_invalid_betas_rejected(bad):
    with pytest.raises(ScheduleError):
        from_betas(bad)


@pytest.mark.parametrize("steps", [[2, 1, 4], [0, 4], [1, 3], [2, 2, 4], [1.5, 4]])
def test_invalid_selection_rejected(steps):
    with pytest.raises(ScheduleError):
        sub_schedule(make_linear_schedule(4), steps)


def test_timestep_range_checked(linear):
    with pytest.raises(ScheduleError):
        linear.a(0)
    with pytest.raises(ScheduleError):
        linear.a(1001)


def test_to_csv_has_schema_header(tmp_path):
    make_linear_schedule(3).to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "# schema: noise-schedule v1"
    assert len(lines) == 5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 199), min_size=1, max_size=40, unique=True))
def test_respaced_marginals_exact(chosen):
    s = make_linear_schedule(200)
    steps = sorted(set(chosen) | {200})
    r = sub_schedule(s, steps)
    np.testing.assert_allclose(np.cumprod(r.alpha), s.alpha_bar[np.array(steps) - 1], rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 2000), st.floats(1e-5, 1e-2), st.floats(1e-2, 0.5))
def test_alpha_bar_decreasing(T, b0, b1):
    s = make_linear_schedule(T, b0, b1)
    assert s.abar(T) < s.abar(1)
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_alpha_bar_end_shrinks_with_T():
    ends = [make_linear_schedule(T).abar(T) for T in (100, 500, 1000, 2000)]
    assert all(a > b for a, b in zip(ends, ends[1:]))
