import numpy as np
import pytest

from pianodiff.schedule import (ScheduleError, ScheduleKind, absorbing_view, build_schedule,
                                cumulative_apply, cumulative_matrix, transition_matrix)

SWEEP = [0.4, 0.6, 0.8, 0.9, 1.0]


def test_midpoint_values():
    s = build_schedule(100, 0.9, 5)
    assert s.alpha_bar[50] == pytest.approx(0.5, abs=1e-12)
    assert s.gamma_bar[50] == pytest.approx(0.45, abs=1e-12)
    assert s.beta_bar[50] == pytest.approx(0.01, abs=1e-12)


def test_step_zero_is_identity():
    s = build_schedule(100, 0.9)
    assert (s.alpha_bar[0], s.gamma_bar[0], s.beta_bar[0]) == (1.0, 0.0, 0.0)
    assert np.array_equal(cumulative_matrix(s, 0), np.eye(6))
    for state in range(6):
        assert np.array_equal(cumulative_apply(s, 0, state), np.eye(6)[state])


def test_full_masking_has_no_replacement():
    s = build_schedule(100, 1.0)
    assert np.all(s.beta_bar == 0.0)
    assert np.all(s.beta == 0.0)
    assert cumulative_apply(s, 100, 2)[5] == 1.0


def test_per_step_recovery():
    # hand arithmetic: alpha_50 = 0.5/0.51, gamma_50 = 1 - 0.55/0.559
    s = build_schedule(100, 0.9)
    alpha = 0.5 / 0.51
    gamma = 1 - 0.55 / 0.559
    assert s.alpha[50] == pytest.approx(alpha, abs=1e-12)
    assert s.gamma[50] == pytest.approx(gamma, abs=1e-12)
    assert s.beta[50] == pytest.approx((1 - alpha - gamma) / 5, abs=1e-12)
    assert s.beta[50] == pytest.approx(0.0007016, abs=1e-7)


@pytest.mark.parametrize("g", SWEEP)
def test_schedule_invariants(g):
    s = build_schedule(100, g)
    K = s.num_label_states
    assert np.allclose(s.alpha_bar + K * s.beta_bar + s.gamma_bar, 1, atol=1e-12, rtol=0)
    assert np.allclose(s.alpha + K * s.beta + s.gamma, 1, atol=1e-12, rtol=0)
    for arr in (s.alpha_bar, s.beta_bar, s.gamma_bar, s.alpha, s.beta, s.gamma):
        assert np.all(arr >= 0)
    assert np.allclose(np.cumprod(s.alpha), s.alpha_bar, atol=1e-12, rtol=0)
    assert np.allclose(1 - np.cumprod(1 - s.gamma), s.gamma_bar, atol=1e-12, rtol=0)
    taus = np.arange(101)
    assert np.allclose(1 - s.alpha_bar - s.gamma_bar, taus / 100 * (1 - g), atol=1e-12, rtol=0)


@pytest.mark.parametrize("g", SWEEP)
def test_matrices_are_column_stochastic(g):
    s = build_schedule(100, g)
    for tau in range(1, 101):
        Q = transition_matrix(s, tau)
        assert np.all(Q >= 0)
        assert np.allclose(Q.sum(0), 1, atol=1e-12, rtol=0)
        assert np.array_equal(Q[:, 5], np.eye(6)[5])
    Qbar = np.eye(6)
    for tau in range(0, 101):
        if tau:
            Qbar = transition_matrix(s, tau) @ Qbar
        assert np.all(Qbar >= -1e-15)
        assert np.allclose(Qbar.sum(0), 1, atol=1e-9, rtol=0)


@pytest.mark.parametrize("g", SWEEP)
def test_closed_form_matches_matrix_product(g):
    s = build_schedule(100, g)
    Qbar = np.eye(6)
    worst = 0.0
    for tau in range(101):
        if tau:
            Qbar = transition_matrix(s, tau) @ Qbar
        for state in range(6):
            worst = max(worst, np.abs(Qbar[:, state] - cumulative_apply(s, tau, state)).max())
    assert worst < 1e-9
    assert np.allclose(cumulative_matrix(s, 37), transition_matrix(s, 37) @ cumulative_matrix(s, 36))


def test_absorbing_view():
    s = build_schedule(100, 0.9)
    a = absorbing_view(s)
    assert a.kind is ScheduleKind.ABSORBING_INFERENCE
    assert a.gamma_bar[50] == pytest.approx(0.45 + 5 * 0.01, abs=1e-12)
    assert a.gamma_bar[50] == pytest.approx(1 - s.alpha_bar[50], abs=1e-12)
    assert np.array_equal(a.alpha_bar, s.alpha_bar)
    assert np.all(a.beta == 0) and np.all(a.beta_bar == 0)
    assert np.allclose(1 - a.alpha_bar, a.gamma_bar + 5 * a.beta_bar, atol=1e-12)
    for tau in range(101):
        assert np.abs(cumulative_matrix(a, tau)[:, 3] - cumulative_apply(a, tau, 3)).max() < 1e-9


def test_absorbing_view_fixed_point():
    s = build_schedule(100, 1.0)
    a = absorbing_view(s)
    for name in ("alpha_bar", "beta_bar", "gamma_bar", "alpha", "beta", "gamma"):
        assert np.allclose(getattr(a, name), getattr(s, name), atol=1e-15, rtol=0), name


@pytest.mark.parametrize("args", [(0, 0.9, 5), (10, 0.0, 5), (10, 1.1, 5), (10, 0.5, 1)])
def test_bad_parameters(args):
    with pytest.raises(ScheduleError):
        build_schedule(*args)


def test_step_out_of_range():
    s = build_schedule(10, 0.9)
    with pytest.raises(ScheduleError):
        transition_matrix(s, 0)
    with pytest.raises(ScheduleError):
        cumulative_apply(s, 11, 0)
    with pytest.raises(ScheduleError):
        cumulative_matrix(s, -1)
