import numpy as np
import pytest
from hypothesis import given, strategies as st

from geodrift.sde import (ObservationSet, SimConfig, SimulationError, Trajectory,
                          euler_maruyama, make_drift, read_csv_states,
                          read_observations_csv, subsample, subsample_observations,
                          write_observations_csv, write_trajectory_csv)


def test_vdp_hand_value():
    f = make_drift("vdp", {"mu": 1.0})
    x1, x2 = 1.81, -1.41
    expected = np.array([x1 - x1**3 / 3 - x2, x1])
    np.testing.assert_allclose(f(np.array([x1, x2])), expected, rtol=0, atol=1e-14)
    assert f(np.array([x1, x2]))[0] == pytest.approx(1.2434196667, abs=1e-9)


def test_zero_field():
    f = make_drift("zero", {})
    np.testing.assert_array_equal(f(np.array([[3.0, -2.0], [0.1, 7.0]])), 0.0)


def test_selkov_origin():
    f = make_drift("selkov", {"alpha": 0.06})
    np.testing.assert_allclose(f(np.zeros(2)), [0.0, 0.6], atol=1e-15)


def test_hopf_and_outofeq_formulas():
    h = make_drift("hopf", {"mu": 0.35})
    x = np.array([0.7, -0.2])
    np.testing.assert_allclose(h(x), [x[1], -x[0] + (0.35 - x[0] ** 2) * x[1]])
    o = make_drift("outofeq", {"alpha": 10.0, "obstacle_width": 0.5})
    Om = np.array([[2.0, 2.0], [-2.0, 2.0]])
    bump = 10.0 * np.exp(-np.sum(x**2) / (2 * 0.5**2))
    np.testing.assert_allclose(o(x), -Om @ x + bump * x)


@pytest.mark.parametrize("name", ["vdp", "hopf", "selkov", "outofeq", "linear"])
def test_analytic_jacobian_matches_differences(name):
    from oracles import numerical_jacobian
    f = make_drift(name, {})
    rng = np.random.default_rng(1)
    for x in rng.normal(size=(5, 2)):
        np.testing.assert_allclose(f.jacobian(x), numerical_jacobian(f, x), atol=1e-7)


def test_unknown_system_and_bad_params():
    with pytest.raises(ValueError):
        make_drift("lorenz", {})
    with pytest.raises(ValueError):
        make_drift("vdp", {"mu": float("nan")})


def test_no_dynamics_constant_trajectory():
    tr = euler_maruyama(make_drift("zero", {}), SimConfig(dt=0.1, T=5.0, sigma=0.0, x0=(1.0, 2.0)))
    assert len(tr.states) == 51
    np.testing.assert_array_equal(tr.states, np.tile([1.0, 2.0], (51, 1)))


def test_one_explicit_step():
    f = make_drift("linear", {"A": [[-1.0]]})
    tr = euler_maruyama(f, SimConfig(dt=0.01, T=0.01, sigma=0.0, x0=(1.0,)))
    assert tr.states[1, 0] == pytest.approx(0.99, abs=1e-15)


def test_ou_stationary_variance():
    f = make_drift("linear", {"A": [[-1.0]]})
    tr = euler_maruyama(f, SimConfig(dt=0.01, T=500, sigma=0.5, x0=(0.0,), seed=3))
    assert np.var(tr.states[1000:]) == pytest.approx(0.125, rel=0.10)


def test_length_and_time_grid():
    tr = euler_maruyama(make_drift("vdp", {}), SimConfig(dt=0.01, T=1.0, sigma=0.25, x0=(1.81, -1.41)))
    assert len(tr.states) == 101 == len(tr.times)
    np.testing.assert_allclose(np.diff(tr.times), 0.01, rtol=1e-12)


def test_bitwise_reproducible():
    cfg = SimConfig(dt=0.01, T=20, sigma=0.25, x0=(1.81, -1.41), seed=11)
    a = euler_maruyama(make_drift("vdp", {}), cfg)
    b = euler_maruyama(make_drift("vdp", {}), cfg)
    assert a.states.tobytes() == b.states.tobytes()


def test_zero_drift_increments_mean_zero():
    sigma, dt = 0.7, 0.01
    tr = euler_maruyama(make_drift("zero", {}), SimConfig(dt=dt, T=100, sigma=sigma, x0=(0.0, 0.0), seed=5))
    inc = np.diff(tr.states, axis=0)
    bound = 4 * sigma * np.sqrt(dt) / np.sqrt(len(inc))
    assert np.all(np.abs(inc.mean(axis=0)) < bound)


def test_blow_up_is_reported():
    f = make_drift("linear", {"A": [[50.0]]})
    with pytest.raises(SimulationError, match="step"), np.errstate(over="ignore"):
        euler_maruyama(f, SimConfig(dt=1.0, T=1000, sigma=0.0, x0=(1.0,)))


def test_invalid_sim_config():
    for kw in ({"dt": 0.0}, {"T": 0.001}, {"sigma": -1.0}):
        base = dict(dt=0.01, T=1.0, sigma=0.1, x0=(0.0,))
        base.update(kw)
        with pytest.raises(ValueError):
            SimConfig(**base)


def test_subsample_examples():
    tr = euler_maruyama(make_drift("vdp", {}), SimConfig(dt=0.01, T=1.0, sigma=0.25, x0=(1.81, -1.41)))
    same = subsample(tr, 1)
    np.testing.assert_array_equal(same.observations, tr.states)
    ten = subsample(tr, 10)
    assert len(ten) == 11
    np.testing.assert_array_equal(ten.observations, tr.states[::10])
    assert subsample(tr, 120 // 12).tau == pytest.approx(0.1)
    with pytest.raises(ValueError):
        subsample(tr, 500)


def test_tau_for_stride_120():
    tr = Trajectory(np.arange(501) * 0.01, np.zeros((501, 2)))
    assert subsample(tr, 120).tau == pytest.approx(1.2)


@given(st.integers(1, 6), st.integers(1, 6))
def test_subsample_composes(a, b):
    tr = Trajectory(np.arange(200) * 0.01, np.arange(400, dtype=float).reshape(200, 2))
    if a * b >= 200:
        return
    direct = subsample(tr, a * b)
    composed = subsample_observations(subsample(tr, a), b)
    np.testing.assert_array_equal(direct.observations, composed.observations)
    assert composed.stride == a * b
    assert composed.tau == pytest.approx(direct.tau)


def test_csv_round_trip(tmp_path):
    tr = euler_maruyama(make_drift("vdp", {}), SimConfig(dt=0.01, T=2.0, sigma=0.25, x0=(1.81, -1.41), seed=2))
    obs = subsample(tr, 20)
    write_trajectory_csv(tmp_path / "t.csv", tr)
    write_observations_csv(tmp_path / "o.csv", obs)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "t,x1,x2"
    t, X = read_csv_states(tmp_path / "t.csv")
    np.testing.assert_array_equal(X, tr.states)
    back = read_observations_csv(tmp_path / "o.csv", dt=0.01)
    assert isinstance(back, ObservationSet)
    np.testing.assert_array_equal(back.observations, obs.observations)
    assert back.stride == 20
