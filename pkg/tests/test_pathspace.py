import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdeis.errors import NonFiniteCost
from sdeis.model import MODEL_NAMES, SdeModel, builtin_model, deterministic_trajectory, quadratic_loglik
from sdeis.pathspace import (
    BlockTridiag,
    log_prior_density,
    path_cost,
    path_cost_grad,
    path_cost_hessian,
)


def bm(obs_y=0.0, obs_r=np.inf, sigma=1.0):
    return builtin_model("linear_gaussian", dict(rate=0.0, sigma=sigma, obs_y=obs_y, obs_r=obs_r))[0]


def fd_grad(model, dt, start, path):
    g = np.zeros_like(path)
    for idx in np.ndindex(path.shape):
        h = 1e-5 * max(1.0, abs(path[idx]))
        p, m = path.copy(), path.copy()
        p[idx] += h
        m[idx] -= h
        g[idx] = (path_cost(model, dt, start, p) - path_cost(model, dt, start, m)) / (2 * h)
    return g


def fd_hessian(model, dt, start, path):
    n = path.size
    out = np.zeros((n, n))
    flat = path.ravel()
    for j in range(n):
        h = 1e-5 * max(1.0, abs(flat[j]))
        p, m = flat.copy(), flat.copy()
        p[j] += h
        m[j] -= h
        gp = path_cost_grad(model, dt, start, p.reshape(path.shape)).ravel()
        gm = path_cost_grad(model, dt, start, m.reshape(path.shape)).ravel()
        out[:, j] = (gp - gm) / (2 * h)
    return out


def test_cost_by_hand():
    assert path_cost(bm(), 0.5, np.zeros(1), np.array([[1.0], [1.0]])) == pytest.approx(1.0)


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_deterministic_trajectory_costs_zero_without_observation(name):
    model, grid = builtin_model(name, {"n_steps": 20})
    free = SdeModel(model.dim, model.sigma, model.drift, model.drift_jacobian,
                    *quadratic_loglik(np.zeros(model.dim), np.inf), stepper=model.stepper)
    path = deterministic_trajectory(free, grid.x0, grid.dt, 20)
    assert path_cost(free, grid.dt, grid.x0, path) == pytest.approx(0.0, abs=1e-20)


def test_constant_path_on_unimodal():
    model, grid = builtin_model("bm_unimodal")
    assert path_cost(model, 0.01, np.zeros(1), np.zeros((100, 1))) == 0.0


def test_non_finite_cost():
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteCost):
        path_cost(bm(), 0.1, np.zeros(1), np.array([[np.inf]]))


def test_hessian_of_free_brownian_motion():
    dt = 0.1
    h = path_cost_hessian(bm(), dt, np.zeros(1), np.zeros((5, 1)))
    np.testing.assert_allclose(h.diag[:-1, 0, 0], 2 / dt)
    assert h.diag[-1, 0, 0] == pytest.approx(1 / dt)
    np.testing.assert_allclose(h.offdiag[:, 0, 0], -1 / dt)


def test_gradient_of_quadratic_cost_is_linear():
    model = bm(obs_y=1.0, obs_r=1.0)
    dt, K = 0.01, 100
    phi = (0.5 * np.arange(1, K + 1) / K)[:, None]
    H = path_cost_hessian(model, dt, np.zeros(1), phi)
    x = np.random.default_rng(3).normal(size=(K, 1))
    np.testing.assert_allclose(path_cost_grad(model, dt, np.zeros(1), x), H.matvec(x - phi),
                               atol=1e-10 * np.max(np.abs(H.matvec(x - phi))))
    assert np.max(np.abs(path_cost_grad(model, dt, np.zeros(1), phi))) <= 1e-8


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_gradient_matches_differences(name):
    model, grid = builtin_model(name, {"n_steps": 6})
    rng = np.random.default_rng(4)
    path = rng.uniform(-1.5, 1.5, size=(6, model.dim))
    g = path_cost_grad(model, grid.dt, grid.x0, path)
    fd = fd_grad(model, grid.dt, grid.x0, path)
    assert np.max(np.abs(g - fd)) <= 1e-6 * max(1.0, np.max(np.abs(g)))


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_hessian_matches_differences(name):
    model, grid = builtin_model(name, {"n_steps": 6})
    path = np.random.default_rng(5).uniform(-1.5, 1.5, size=(6, model.dim))
    H = path_cost_hessian(model, grid.dt, grid.x0, path).to_dense()
    fd = fd_hessian(model, grid.dt, grid.x0, path)
    assert np.max(np.abs(H - fd)) <= 1e-4 * max(1.0, np.max(np.abs(H)))
    np.testing.assert_array_equal(H, H.T)


def test_hessian_batched_equals_single():
    model, grid = builtin_model("gissinger", {"n_steps": 5})
    paths = np.random.default_rng(6).normal(size=(3, 5, 3))
    both = path_cost_hessian(model, grid.dt, grid.x0, paths)
    one = path_cost_hessian(model, grid.dt, grid.x0, paths[2])
    np.testing.assert_allclose(both.diag[2], one.diag, rtol=1e-14)
    np.testing.assert_allclose(both.offdiag[2], one.offdiag, rtol=1e-14)


def test_block_tridiag_matvec_and_dense():
    rng = np.random.default_rng(7)
    K, D = 4, 2
    diag = rng.normal(size=(K, D, D))
    diag = diag + np.swapaxes(diag, -1, -2)
    t = BlockTridiag(diag, rng.normal(size=(K - 1, D, D)))
    dense = t.to_dense()
    np.testing.assert_array_equal(dense, dense.T)
    v = rng.normal(size=(K, D))
    np.testing.assert_allclose(t.matvec(v).ravel(), dense @ v.ravel(), rtol=1e-12)
    np.testing.assert_allclose(t.add_identity(2.0).to_dense(), dense + 2 * np.eye(K * D))


def test_prior_density_at_the_mean():
    model = bm(sigma=1.3)
    dt, eps = 0.1, 0.05
    lp = log_prior_density(model, dt, eps, np.array([0.4]), np.array([[0.4]]))
    assert lp == pytest.approx(-0.5 * np.log(2 * np.pi * dt * eps * 1.3**2))


def test_prior_density_is_markov():
    model, grid = builtin_model("langevin_bimodal")
    x0 = np.array([0.3])
    path = np.array([[0.5], [-0.2]])
    two = log_prior_density(model, 0.1, 0.2, x0, path)
    one = (log_prior_density(model, 0.1, 0.2, x0, path[:1])
           + log_prior_density(model, 0.1, 0.2, path[0], path[1:]))
    assert two == pytest.approx(one, abs=1e-12)


def test_prior_density_matches_cost():
    model, grid = builtin_model("gissinger")
    free = SdeModel(3, 1.0, model.drift, model.drift_jacobian,
                    *quadratic_loglik(np.zeros(3), np.inf), stepper=model.stepper)
    eps = 0.01
    paths = np.random.default_rng(8).normal(size=(10, 20, 3))
    total = (log_prior_density(free, 0.1, eps, grid.x0, paths)
             + path_cost(free, 0.1, grid.x0, paths) / eps)
    assert np.ptp(total) <= 1e-10 * np.max(np.abs(total))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8), st.sampled_from(MODEL_NAMES[:3]))
def test_cost_nonnegative(values, name):
    model, grid = builtin_model(name)
    path = np.array(values)[:, None]
    assert path_cost(model, grid.dt, grid.x0, path) >= -1e-12
