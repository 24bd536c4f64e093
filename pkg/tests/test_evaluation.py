import numpy as np
import pytest
from hypothesis import given, strategies as st

from geodrift.evaluation import (EvaluationError, curvature_report, em_bias_estimate,
                                 flow_curvature, kde_weights, make_grid, wrmse,
                                 wrmse_node_normalised, wrmse_per_component)
from geodrift.sde import DriftField, make_drift


@pytest.fixture(scope="module")
def obs():
    rng = np.random.default_rng(0)
    return rng.normal(size=(300, 2)) * [1.0, 0.6]


@pytest.fixture(scope="module")
def grid(obs):
    return make_grid(obs, 30)


def rotation():
    return DriftField(lambda x: np.stack([-x[..., 1], x[..., 0]], -1), 2, "rotation")


def constant(c):
    c = np.asarray(c, float)
    return DriftField(lambda x: np.broadcast_to(c, x.shape).copy(), 2, "constant",
                      jacobian=lambda x: np.zeros(x.shape + (2,)),
                      hessian=lambda x: np.zeros(x.shape + (2, 2)),
                      grad_laplacian=lambda x: np.zeros(x.shape + (2,)))


# --- grid and weights -------------------------------------------------------


def test_weights_normalised(grid):
    assert np.all(grid.weights >= 0)
    assert abs(grid.weights.sum() - 1.0) < 1e-12
    assert grid.nodes.shape == (900, 2)


def test_grid_box_inflated(obs, grid):
    lo, hi = obs.min(0), obs.max(0)
    pad = 0.05 * (hi - lo) / 2
    np.testing.assert_allclose(grid.lower, lo - pad)
    np.testing.assert_allclose(grid.upper, hi + pad)


def test_single_observation_mode():
    nodes = np.stack(np.meshgrid(np.linspace(-1, 1, 11), np.linspace(-1, 1, 11), indexing="ij"), -1).reshape(-1, 2)
    o = nodes[37]
    w = kde_weights(o[None], nodes, bandwidths=np.array([0.3, 0.3]))
    assert np.argmax(w) == 37


def test_uniform_observations_give_flat_weights():
    rng = np.random.default_rng(1)
    U = rng.uniform(0, 1, size=(10_000, 2))
    g = np.linspace(0.2, 0.8, 7)
    nodes = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    w = kde_weights(U, nodes)
    assert w.max() / w.min() < 1.5


def test_empty_grid_rejected(obs):
    with pytest.raises(ValueError):
        kde_weights(obs, np.zeros((0, 2)))


# --- wRMSE ------------------------------------------------------------------


def test_identical_fields(grid):
    f = make_drift("vdp", {})
    assert wrmse(f, f, grid) == 0.0


def test_constant_offset_exact(grid):
    f = make_drift("vdp", {})
    c = np.array([0.3, -0.4])
    g = DriftField(lambda x: f(x) + c, 2)
    assert wrmse(f, g, grid) == pytest.approx(0.5, rel=1e-12)
    assert wrmse_per_component(f, g, grid) == pytest.approx(0.5 / np.sqrt(2), rel=1e-12)
    assert wrmse_node_normalised(f, g, grid) == pytest.approx(0.5 * 30, rel=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    nodes = rng.normal(size=(40, 2))
    grid = make_grid(nodes, 8)
    mats = [rng.normal(size=(2, 2)) for _ in range(3)]
    fs = [DriftField(lambda x, M=M: np.sin(x @ M.T), 2) for M in mats]
    ab, bc, ac = wrmse(fs[0], fs[1], grid), wrmse(fs[1], fs[2], grid), wrmse(fs[0], fs[2], grid)
    assert ac <= ab + bc + 1e-12


def test_zero_iff_agree_on_support(grid):
    f = make_drift("vdp", {})
    far = grid.upper + 100.0
    g = DriftField(lambda x: f(x) + 1e3 * np.exp(-np.sum((x - far) ** 2, -1))[..., None], 2)
    assert wrmse(f, g, grid) < 1e-12


def test_non_finite_rejected(grid):
    bad = DriftField(lambda x: np.full(x.shape, np.nan), 2)
    with pytest.raises(EvaluationError):
        wrmse(make_drift("vdp", {}), bad, grid)


# --- curvature ----------------------------------------------------------------


def test_constant_field_zero_curvature():
    np.testing.assert_array_equal(flow_curvature(constant([1.0, 2.0]), np.array([0.3, 0.4])), 0.0)


def test_rotation_hand_value():
    np.testing.assert_allclose(flow_curvature(rotation(), np.array([1.0, 0.0])), [-1.0, 0.0], atol=1e-8)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_curvature_orthogonal(x, y):
    f = make_drift("vdp", {})
    p = np.array([x, y])
    fx = f(p)
    if np.linalg.norm(fx) <= 1e-3:
        return
    k = flow_curvature(f, p)
    assert abs(k @ fx) <= 1e-8 * np.linalg.norm(k) * np.linalg.norm(fx) + 1e-14


@given(st.floats(0.1, 10.0))
def test_curvature_scale_invariant(c):
    f = make_drift("vdp", {})
    g = DriftField(lambda x: c * f(x), 2, jacobian=lambda x: c * f.jacobian(x))
    p = np.array([0.7, -1.2])
    np.testing.assert_allclose(flow_curvature(g, p), flow_curvature(f, p), rtol=1e-10)


def test_equilibrium_signalled():
    with pytest.raises(EvaluationError):
        flow_curvature(make_drift("vdp", {}), np.zeros(2))


# --- bias ---------------------------------------------------------------------


def test_linear_bias_closed_form():
    A = np.array([[-0.5, 1.0], [-1.0, -0.2]])
    f = make_drift("linear", {"A": A})
    x = np.array([0.4, -0.9])
    for tau in (0.5, 1.0, 2.0):
        ref = 0.5 * tau * np.linalg.matrix_power(A, 3) @ x
        np.testing.assert_allclose(em_bias_estimate(f, 0.7, tau, x), ref, atol=1e-6)
        np.testing.assert_allclose(em_bias_estimate(f, 0.7, tau, x, method="fd"), ref, atol=1e-6)


def test_minus_identity_example():
    f = make_drift("linear", {"A": -np.eye(2)})
    np.testing.assert_allclose(em_bias_estimate(f, 0.3, 1.0, np.array([1.0, 0.0])), [-0.5, 0.0], atol=1e-12)


def test_constant_field_zero_bias():
    np.testing.assert_array_equal(em_bias_estimate(constant([1.0, -1.0]), 0.5, 1.0, np.ones(2)), 0.0)


def test_bias_linear_in_tau():
    f = make_drift("vdp", {})
    x = np.array([0.5, 1.5])
    np.testing.assert_allclose(em_bias_estimate(f, 0.25, 2.4, x), 2 * em_bias_estimate(f, 0.25, 1.2, x), rtol=1e-14)


def test_vdp_fd_matches_analytic():
    f = make_drift("vdp", {})
    X = np.random.default_rng(2).uniform(-2, 2, size=(20, 2))
    an = em_bias_estimate(f, 0.5, 1.0, X, method="analytic")
    fd = em_bias_estimate(f, 0.5, 1.0, X, method="fd")
    rel = np.linalg.norm(fd - an, axis=1) / np.linalg.norm(an, axis=1)
    assert rel.max() < 1e-3


def test_report_marks_equilibria(grid):
    f = make_drift("vdp", {})
    nodes = np.vstack([np.zeros((1, 2)), grid.nodes[:20]])
    rep = curvature_report(f, 0.25, 1.2, nodes)
    assert np.all(np.isnan(rep.kappa[0]))
    assert np.all(np.isfinite(rep.kappa[1:]))
    s = rep.summary()
    assert s["n_equilibrium_nodes"] == 1
