import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from climctl.control import (
    BoundsBox,
    PiGains,
    SaiSurrogate,
    closed_loop_simulate,
    envelope_containment,
    pi_step,
    plan_sai_shares,
    project_scaled_simplex,
    random_piecewise_signal,
    reachable_envelope,
    sampled_reach_bounds,
)
from climctl.ebm import SECONDS_PER_DAY, Ebm0dParams, Ebm2dParams, ParameterDomainError, ebm0d_model, ebm2d_model

P = Ebm0dParams()


def test_pi_step_by_hand():
    g = PiGains(kp=2.0, ki=0.5)
    u, i = pi_step(1.5, 1.0, 2.0, g)
    assert i == 4.0 and u == pytest.approx(2.0 * 1.5 + 0.5 * 4.0)


def test_pi_clamps_output_and_integral():
    g = PiGains(kp=1.0, ki=1.0, u_min=-1.0, u_max=1.0, integral_limit=3.0)
    integral = 0.0
    for _ in range(100):
        u, integral = pi_step(10.0, integral, 1.0, g)
    assert u == 1.0 and integral == 3.0
    # wind-down starts immediately thanks to the bounded integral
    u, _ = pi_step(-4.5, integral, 1.0, g)
    assert u == -1.0 + 0.0 or u <= 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(1e-3, 10), st.floats(0, 5), st.floats(0, 5))
def test_pi_output_respects_bounds(err, integral, dt, kp, ki):
    g = PiGains(kp=kp, ki=ki, u_min=-0.5, u_max=0.25, integral_limit=100.0)
    u, i = pi_step(err, integral, dt, g)
    assert -0.5 <= u <= 0.25 and abs(i) <= 100.0


def test_gain_validation():
    with pytest.raises(ValueError):
        PiGains(1.0, 1.0, u_min=1.0, u_max=0.0)
    with pytest.raises(ValueError):
        pi_step(1.0, 0.0, 0.0, PiGains(1.0, 1.0))


def test_closed_loop_tracks_target():
    target = 400.0
    gains = PiGains(kp=0.01, ki=3e-10, u_min=0.0, u_max=0.5, integral_limit=1e10, reverse_acting=True)
    traj = closed_loop_simulate(ebm0d_model(P), gains, target, [288.0], SECONDS_PER_DAY,
                                50 * 365, disturbance=[-0.15])
    assert traj.states[-1, 0] == pytest.approx(target, abs=0.05)
    assert np.all((traj.inputs >= 0.0) & (traj.inputs <= 0.5))
    # the steady command is the albedo shift that puts the equilibrium on target
    u_ss = 1.0 - (P.epsilon - 0.15) * P.sigma * target ** 4 / P.S - P.alpha
    assert traj.inputs[-1, 0] == pytest.approx(u_ss, abs=2e-3)


def test_closed_loop_saturates_when_target_unreachable():
    gains = PiGains(kp=0.01, ki=1e-9, u_min=0.0, u_max=0.1, integral_limit=1e8, reverse_acting=True)
    traj = closed_loop_simulate(ebm0d_model(P), gains, 300.0, [288.0], SECONDS_PER_DAY, 3650)
    assert traj.inputs[-1, 0] == 0.1


def test_closed_loop_noise_is_seeded():
    gains = PiGains(kp=0.01, ki=0.0, u_min=0.0, u_max=0.5, reverse_acting=True)
    run = lambda seed: closed_loop_simulate(ebm0d_model(P), gains, 280.0, [288.0],  # noqa: E731
                                            SECONDS_PER_DAY, 100, output_noise_std=1.0, seed=seed)
    assert np.array_equal(run(1).states, run(1).states)
    assert not np.array_equal(run(1).states, run(2).states)


def test_closed_loop_on_gridded_model():
    p2 = Ebm2dParams.uniform(1, 2, P, kappa=1.0)
    gains = PiGains(kp=0.01, ki=3e-10, u_min=0.0, u_max=0.5, integral_limit=1e10, reverse_acting=True)
    traj = closed_loop_simulate(ebm2d_model(p2, sensors=[0]), gains, 395.0, [288.0, 290.0],
                                SECONDS_PER_DAY, 50 * 365)
    assert traj.outputs[-1, 0] == pytest.approx(395.0, abs=0.1)


# -- SAI ----------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(0.0, 5.0))
def test_projection_properties(v, total):
    v = np.array(v)
    x = project_scaled_simplex(v, total)
    assert np.all(x >= 0) and x.sum() == pytest.approx(total, abs=1e-9)
    # optimality: no simplex vertex is closer to v along the projection direction
    for j in range(v.size):
        e = np.zeros(v.size)
        e[j] = total
        assert (v - x) @ (e - x) <= 1e-9


def test_projection_identity_on_simplex():
    x = np.array([0.2, 0.3, 0.5])
    assert np.allclose(project_scaled_simplex(x, 1.0), x)


def test_sai_interior_solution_matches_lstsq():
    # square invertible G with feasible exact solution => zero objective
    G = np.array([[1.0, 0.5, 0.0], [0.0, 1.0, 0.5], [0.5, 0.0, 1.0]])
    s_true = np.array([0.2, 0.5, 0.3])
    sur = SaiSurrogate(G, G @ s_true, 1.0)
    plan = plan_sai_shares(sur, return_info=True)
    assert plan.converged and np.allclose(plan.shares, s_true, atol=1e-5)
    assert plan.objective < 1e-10


def test_sai_vertex_solution():
    G = np.eye(3)
    sur = SaiSurrogate(G, [5.0, 0.0, 0.0], 1.0)
    assert np.allclose(plan_sai_shares(sur), [1.0, 0.0, 0.0], atol=1e-8)


def test_sai_weights_and_zero_total():
    G = np.eye(2)
    sur = SaiSurrogate(G, [1.0, 1.0], 1.0, weights=[3.0, 1.0])
    s = plan_sai_shares(sur)
    # 3(a-1)^2 + (b-1)^2 on a+b=1: stationarity 6(a-1) = 2(b-1) gives a = 3/4
    assert s[0] == pytest.approx(0.75, abs=1e-6)
    zero = SaiSurrogate(G, [1.0, 1.0], 0.0)
    assert np.array_equal(plan_sai_shares(zero), [0.0, 0.0])


def test_sai_validation():
    with pytest.raises(ValueError):
        SaiSurrogate(np.eye(2), [1.0], 1.0)
    with pytest.raises(ValueError):
        SaiSurrogate(np.eye(2), [1.0, 1.0], 1.0, weights=[-1.0, 1.0])
    with pytest.raises(ParameterDomainError):
        SaiSurrogate(np.eye(2), [1.0, 1.0], -1.0)
    s = SaiSurrogate.from_dict({"G": [[1, 0], [0, 1]], "target": [0, 1], "total_cooling": 1,
                                "policy_names": ["a", "b"]})
    assert s.policy_names == ("a", "b") and s.n_policies == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_sai_feasible_and_no_worse_than_random_feasible(seed):
    rng = np.random.default_rng(seed)
    sur = SaiSurrogate(rng.normal(size=(4, 5)), rng.normal(size=4), 1.5, rng.uniform(0.5, 2, 4))
    s = plan_sai_shares(sur)
    assert np.all(s >= 0) and s.sum() == pytest.approx(1.5, abs=1e-10)
    others = rng.dirichlet(np.ones(5), size=200) * 1.5
    assert sur.objective(s) <= min(sur.objective(o) for o in others) + 1e-9


# -- reachability ---------------------------------------------------------------

BOX = BoundsBox(0.0, 0.2, -0.15, 0.0)


def test_envelope_brackets_constant_extremes():
    lower, upper = reachable_envelope(P, BOX, 288.0, SECONDS_PER_DAY, 3650)
    assert np.all(lower.states <= upper.states)
    mid = ebm0d_model(P)
    from climctl.core import constant_forcing, integrate_euler
    traj = integrate_euler(mid, [288.0], constant_forcing([0.1], [-0.05]), SECONDS_PER_DAY, 3650)
    assert np.all(traj.states >= lower.states) and np.all(traj.states <= upper.states)


def test_envelope_containment_short():
    slack = envelope_containment(P, BOX, 288.0, SECONDS_PER_DAY, 730, n_signals=100, seed=3)
    assert slack >= -1e-9


def test_envelope_warns_on_coarse_step():
    with pytest.warns(RuntimeWarning):
        # dt*|df/dT| ~ 1.2: Euler overshoots but stays bounded
        reachable_envelope(P, BOX, 288.0, 1e8, 10)


def test_box_validation():
    with pytest.raises(ValueError):
        BoundsBox(0.2, 0.0, 0.0, 0.0)
    with pytest.raises(ParameterDomainError):
        BoundsBox(0.0, 0.8, 0.0, 0.0).validate_for(P)
    assert BOX.contains(BoundsBox(0.05, 0.1, -0.1, 0.0))
    assert not BOX.contains(BoundsBox(0.05, 0.3, -0.1, 0.0))


def test_random_piecewise_signal_segments():
    sig = random_piecewise_signal(np.random.default_rng(0), -1.0, 1.0, 100, 5)
    assert sig.shape == (100,) and np.all((sig >= -1) & (sig <= 1))
    assert len(np.unique(sig)) <= 5


def test_sampled_bounds_inside_envelope():
    lo, hi = sampled_reach_bounds(ebm0d_model(P), [288.0], BOX.u_lo, BOX.u_hi, BOX.w_lo, BOX.w_hi,
                                  SECONDS_PER_DAY, 365, n_samples=20)
    lower, upper = reachable_envelope(P, BOX, 288.0, SECONDS_PER_DAY, 365)
    assert np.all(lo >= lower.states - 1e-9) and np.all(hi <= upper.states + 1e-9)


def test_degenerate_box_collapses_to_nominal():
    from climctl.core import constant_forcing, integrate_euler
    box = BoundsBox(0.1, 0.1, -0.05, -0.05)
    lower, upper = reachable_envelope(P, box, 288.0, SECONDS_PER_DAY, 365)
    nominal = integrate_euler(ebm0d_model(P), [288.0], constant_forcing([0.1], [-0.05]), SECONDS_PER_DAY, 365)
    assert np.array_equal(lower.states, upper.states) and np.array_equal(lower.states, nominal.states)
