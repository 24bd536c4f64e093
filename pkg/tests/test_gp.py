import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from geodrift import gp
from geodrift.bridge import BridgeSolution
from geodrift.gp import (BridgeIntegrals, GPError, KernelConfig, accumulate_bridge_integrals,
                         accumulate_integrals, default_kernel, grid_inducing, load_model,
                         naive_gp_drift, save_model, se_kernel, sparse_posterior_drift)
from geodrift.sde import SimConfig, euler_maruyama, make_drift, subsample
from oracles import dense_gp_mean

BOX = np.array([[-2.0, -2.0], [2.0, 2.0]])
KERNEL = KernelConfig((1.0, 1.0), 4.0)


def _grid(n=21, lo=-2.0, hi=2.0):
    g = np.linspace(lo, hi, n)
    return np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)


def _fake_bridges(field, n_bridges=20, L=100, N=100, dt=0.01, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_bridges):
        F = rng.uniform(-2.4, 2.4, size=(L + 1, N, 2))
        G = field(F[:-1])
        out.append(BridgeSolution(F=F, G=G, start=F[0, 0], end=F[-1, 0], sigma=0.5, dt=dt, eps_init=1e-3))
    return out


def test_kernel_matches_direct_formula():
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(7, 2)), rng.normal(size=(5, 2))
    k = KernelConfig((0.7, 1.3), 2.0)
    ref = 2.0 * np.exp(-0.5 * np.sum(((X[:, None] - Y[None]) / k.ell) ** 2, -1))
    np.testing.assert_allclose(se_kernel(X, Y, k), ref, rtol=1e-12)


def test_kernel_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        KernelConfig((1.0, -1.0), 1.0)
    with pytest.raises(ValueError):
        KernelConfig((1.0,), 0.0)
    k = KernelConfig((0.3, 2.0), 1.5)
    assert KernelConfig.from_dict(k.to_dict()) == k


# --- naive baseline -------------------------------------------------------------


def test_naive_zero_increments():
    obs = np.tile([[0.5, -0.2]], (30, 1)) + 0.0
    obs = np.vstack([obs[:1]] * 30)
    obs = obs + np.zeros_like(obs)
    rng = np.random.default_rng(1)
    # distinct inputs are not needed: every target is zero
    m = naive_gp_drift(obs, KERNEL, 0.25, 0.1)
    np.testing.assert_array_equal(m(rng.normal(size=(10, 2))), 0.0)


def test_naive_matches_dense_inverse():
    rng = np.random.default_rng(2)
    obs = np.cumsum(rng.normal(scale=0.2, size=(250, 2)), axis=0)
    tau, sigma = 0.5, 0.3
    k = default_kernel(obs, tau)
    m = naive_gp_drift(obs, k, sigma, tau)
    X, Y = obs[:-1], (obs[1:] - obs[:-1]) / tau
    xq = rng.normal(size=(40, 2)) + obs.mean(0)
    ref = dense_gp_mean(X, Y, xq, k.ell, k.variance, sigma**2 / tau)
    np.testing.assert_allclose(m(xq), ref, atol=1e-8, rtol=1e-8)


def test_naive_ou_high_frequency_slope():
    f = make_drift("linear", {"A": [[-1.0]]})
    tr = euler_maruyama(f, SimConfig(dt=0.01, T=500, sigma=0.25, x0=(0.0,), seed=0))
    obs = subsample(tr, 1)
    m = naive_gp_drift(obs.observations, None, 0.25, obs.tau)
    xs = np.linspace(-0.3, 0.3, 31)[:, None]
    slope = np.polyfit(xs[:, 0], m(xs)[:, 0], 1)[0]
    assert slope == pytest.approx(-1.0, rel=0.10)


def test_naive_posterior_variance_bounded():
    rng = np.random.default_rng(3)
    obs = np.cumsum(rng.normal(scale=0.2, size=(100, 2)), axis=0)
    m = naive_gp_drift(obs, KERNEL, 0.3, 0.5)
    v = m.drift_var(rng.normal(size=(50, 2)))
    assert np.all(v >= 0) and np.all(v <= KERNEL.variance + 1e-12)


def test_naive_rejects_bad_input():
    with pytest.raises(ValueError):
        naive_gp_drift(np.zeros((1, 2)), KERNEL, 0.3, 0.5)
    with pytest.raises(ValueError):
        naive_gp_drift(np.zeros((5, 2)), KERNEL, 0.0, 0.5)


# --- integrals --------------------------------------------------------------------


def test_empty_integrals():
    Zs = grid_inducing(BOX, 16)
    ints = accumulate_bridge_integrals([], Zs, KERNEL)
    assert np.all(ints.I1 == 0) and np.all(ints.I2 == 0)


def test_single_term_integrals():
    z = np.array([[0.3, -0.1]])
    x = np.array([0.5, 0.4])
    g = np.array([1.5, -2.0])
    dt = 0.02
    ints = accumulate_integrals([x[None, None]], [g[None, None]], z, KERNEL, dt, 1)
    kzx = KERNEL.variance * np.exp(-0.5 * np.sum((z[0] - x) ** 2))
    np.testing.assert_allclose(ints.I1[:, 0, 0], dt * kzx**2, rtol=1e-12)
    np.testing.assert_allclose(ints.I2[:, 0], dt * kzx * g, rtol=1e-12)


def test_failed_bridges_excluded():
    bridges = _fake_bridges(lambda X: np.ones_like(X), n_bridges=3, L=5)
    Zs = grid_inducing(BOX, 16)
    all_ok = accumulate_bridge_integrals(bridges, Zs, KERNEL)
    bridges[1].failed = True
    part = accumulate_bridge_integrals(bridges, Zs, KERNEL)
    ref = accumulate_bridge_integrals([bridges[0], bridges[2]], Zs, KERNEL)
    np.testing.assert_array_equal(part.I1, ref.I1)
    assert part.n_bridges == 2 and all_ok.n_bridges == 3


def test_integrals_reject_non_finite():
    b = _fake_bridges(lambda X: np.ones_like(X), n_bridges=1, L=3)[0]
    b.G[0, 0, 0] = np.nan
    with pytest.raises(GPError):
        accumulate_bridge_integrals([b], grid_inducing(BOX, 16), KERNEL)


def test_I1_psd():
    bridges = _fake_bridges(lambda X: np.sin(X), n_bridges=4, L=20)
    ints = accumulate_bridge_integrals(bridges, grid_inducing(BOX, 64), KERNEL)
    for I1 in ints.I1:
        np.testing.assert_array_equal(I1, I1.T)
        assert np.linalg.eigvalsh(I1).min() >= -1e-10 * np.trace(I1)


# --- sparse posterior -----------------------------------------------------------


def test_zero_mass_gives_prior_mean():
    Zs = grid_inducing(BOX, 25)
    ints = BridgeIntegrals(np.zeros((2, 25, 25)), np.zeros((2, 25)), 0.01, 100, 0)
    m = sparse_posterior_drift(ints, Zs, KERNEL, 0.5)
    np.testing.assert_array_equal(m(_grid()), 0.0)


@pytest.fixture(scope="module")
def constant_fit():
    c = np.array([1.0, -0.5])
    bridges = _fake_bridges(lambda X: np.broadcast_to(c, X.shape).copy())
    Zs = grid_inducing(BOX, 100)
    ints = accumulate_bridge_integrals(bridges, Zs, KERNEL)
    return c, sparse_posterior_drift(ints, Zs, KERNEL, 0.5)


def test_constant_target_oracle(constant_fit):
    c, m = constant_fit
    assert np.max(np.linalg.norm(m(_grid()) - c, axis=1)) < 0.05 * np.linalg.norm(c)


def test_linear_target_oracle():
    A = np.array([[-1.0, 2.0], [-0.5, -0.3]])
    bridges = _fake_bridges(lambda X: X @ A.T, seed=1)
    Zs = grid_inducing(BOX, 100)
    m = sparse_posterior_drift(accumulate_bridge_integrals(bridges, Zs, KERNEL), Zs, KERNEL, 0.5)
    P = _grid()
    coef = np.linalg.lstsq(np.c_[P, np.ones(len(P))], m(P), rcond=None)[0]
    A_hat = coef[:2].T
    assert np.linalg.norm(A_hat - A, 2) < 0.05 * np.linalg.norm(A, 2)
    for L in m.Lam:
        assert np.linalg.eigvalsh(L).min() >= -1e-10 * np.abs(np.trace(L))


def test_lambda_psd_and_variance_below_prior(constant_fit):
    _, m = constant_fit
    for L in m.Lam:
        np.testing.assert_allclose(L, L.T, rtol=0, atol=0)
        assert np.linalg.eigvalsh(L).min() >= -1e-10 * np.trace(L)
    v = m.drift_var(_grid(11, -4, 4))
    assert np.all(v <= KERNEL.variance + 1e-9) and np.all(v >= 0)


def test_far_field_decay(constant_fit):
    _, m = constant_fit
    far = np.array([[30.0, -30.0]])
    np.testing.assert_allclose(m(far), 0.0, atol=1e-12)
    np.testing.assert_allclose(m.drift_var(far), KERNEL.variance, rtol=1e-9)


def test_interpolation_identity(constant_fit):
    _, m = constant_fit
    np.testing.assert_allclose(m(m.inducing), m.K_S @ m.coef, rtol=1e-12, atol=1e-12)


def test_lipschitz(constant_fit):
    _, m = constant_fit
    P = _grid(81, -3, 3)
    h = 6 / 80
    F = m(P).reshape(81, 81, 2)
    L = max(np.max(np.abs(np.diff(F, axis=0))), np.max(np.abs(np.diff(F, axis=1)))) / h
    assert np.isfinite(L)


def test_divergence_matches_differences():
    A = np.array([[-1.0, 2.0], [-0.5, -0.3]])
    bridges = _fake_bridges(lambda X: np.tanh(X @ A.T), n_bridges=3, L=20, seed=4)
    Zs = grid_inducing(BOX, 64)
    m = sparse_posterior_drift(accumulate_bridge_integrals(bridges, Zs, KERNEL), Zs, KERNEL, 0.5)
    P = _grid(7)
    h = 1e-5
    fd = sum((m(P + h * e)[:, i] - m(P - h * e)[:, i]) / (2 * h) for i, e in enumerate(np.eye(2)))
    np.testing.assert_allclose(m.divergence(P), fd, rtol=1e-6, atol=1e-8)


def test_shared_kernel_across_dimensions(constant_fit):
    _, m = constant_fit
    assert isinstance(m.kernel, KernelConfig)
    d = m.to_dict()
    assert d["kernel"]["lengthscales"] == [1.0, 1.0]


def test_ill_conditioned_raises(monkeypatch):
    Zs = grid_inducing(BOX, 25)
    ints = BridgeIntegrals(np.zeros((2, 25, 25)), np.zeros((2, 25)), 0.01, 100, 0)
    monkeypatch.setattr(gp, "COND_LIMIT", 0.5)
    with pytest.raises(GPError):
        sparse_posterior_drift(ints, Zs, KERNEL, 0.5)


def test_grid_inducing_layout():
    Zs = grid_inducing(np.array([[0.0, 0.0], [4.0, 1.0]]), 300)
    assert 250 <= len(Zs) <= 350
    lo, hi = Zs.min(0), Zs.max(0)
    np.testing.assert_allclose(lo, [-0.2, -0.05])
    np.testing.assert_allclose(hi, [4.2, 1.05])


# --- serialisation --------------------------------------------------------------


def test_sparse_model_round_trip(constant_fit, tmp_path):
    _, m = constant_fit
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.coef.tobytes() == m.coef.tobytes()
    assert back.Lam.tobytes() == m.Lam.tobytes()
    P = _grid()
    assert back(P).tobytes() == m(P).tobytes()
    save_model(back, tmp_path / "m2.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()


@pytest.mark.parametrize("K", [50, 1200])
def test_naive_model_round_trip(tmp_path, K):
    rng = np.random.default_rng(5)
    obs = np.cumsum(rng.normal(scale=0.2, size=(K, 2)), axis=0)
    m = naive_gp_drift(obs, None, 0.3, 0.5, S=50)
    save_model(m, tmp_path / "n.json")
    back = load_model(tmp_path / "n.json")
    P = rng.normal(size=(20, 2)) + obs.mean(0)
    assert back(P).tobytes() == m(P).tobytes()
    np.testing.assert_allclose(back.drift_var(P), m.drift_var(P), rtol=1e-10)
    assert json.loads((tmp_path / "n.json").read_text())["model"] == "naive_gp"


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20))
def test_json_floats_round_trip(vals):
    assert json.loads(json.dumps(vals)) == vals
