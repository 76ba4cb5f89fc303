import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_diff, random_model, rel_err
from scqm.analysis import convexity_radius, hessian_tau, max_slice_norm
from scqm.losses import LossSpec, loss_value
from scqm.optimizer import FitConfig
from scqm.projection import _latent_grad, project
from scqm.quadmap import QuadraticModel, evaluate, jacobian_tau

L2SQ = LossSpec("l2sq")
CFG = FitConfig(max_iters=5000)


def parabola():
    return QuadraticModel(c=np.zeros(2), Q=np.eye(2), Theta=np.array([[1.0]]), d=1)


def projection_value(model, y, loss, tau):
    return float(loss_value(loss, evaluate(model, np.atleast_1d(tau)) - y))


def test_point_on_model_is_fixed():
    rng = np.random.default_rng(0)
    model = random_model(rng)
    tau0 = rng.standard_normal(2)
    y = evaluate(model, tau0)
    # U^T V = 0, so the initializer U^T (y - c) recovers tau0
    np.testing.assert_allclose(model.U.T @ (y - model.c), tau0, atol=1e-14)
    res = project(model, y, L2SQ, CFG)
    np.testing.assert_allclose(res.y_hat, y, atol=1e-10)
    assert res.converged


def test_linear_model_closed_form():
    rng = np.random.default_rng(1)
    model = random_model(rng).linear()
    y = rng.standard_normal(5)
    res = project(model, y, L2SQ, CFG)
    np.testing.assert_allclose(res.tau, model.U.T @ (y - model.c), atol=1e-14)
    assert res.converged


def test_parabola_against_grid_search():
    model = parabola()
    y = np.array([0.0, 1.0])
    grid = np.arange(-30000, 30001) * 1e-4
    vals = grid**2 + (grid**2 - 1) ** 2
    best = grid[vals.argmin()]
    res = project(model, y, L2SQ, CFG, n_starts=5)
    assert abs(abs(res.tau[0]) - abs(best)) < 1e-4
    assert abs(res.tau[0]) == pytest.approx(1 / np.sqrt(2), abs=1e-6)
    assert np.sum((res.y_hat - y) ** 2) == pytest.approx(0.75, abs=1e-10)
    assert res.converged


def test_parabola_single_start_stalls_at_stationary_point():
    # the initializer tau0 = 0 is a local maximum with zero gradient
    res = project(parabola(), np.array([0.0, 1.0]), L2SQ, CFG)
    assert res.tau[0] == 0.0
    assert res.converged


def test_gradient_norm_reported():
    rng = np.random.default_rng(2)
    model = random_model(rng, theta_scale=0.3)
    y = rng.standard_normal(5)
    res = project(model, y, L2SQ, CFG)
    assert res.converged
    assert res.grad_norm < CFG.tol * max(1.0, np.linalg.norm(y))
    J = jacobian_tau(model, res.tau)
    g = J.T @ (2 * (res.y_hat - y))
    assert np.linalg.norm(g) == pytest.approx(res.grad_norm, abs=1e-12)


def test_unconverged_is_flagged():
    rng = np.random.default_rng(3)
    model = random_model(rng, theta_scale=1.0)
    res = project(model, 3 * rng.standard_normal(5), L2SQ, FitConfig(max_iters=1))
    assert not res.converged


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        project(parabola(), np.zeros(3), L2SQ)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("loss", [L2SQ, LossSpec("lpp", p=1.8), LossSpec("huber", delta=1.0)])
def test_projection_gradient_matches_finite_differences(seed, loss):
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    y = rng.standard_normal(5)
    tau = rng.standard_normal(2)
    args = (model.c[None], model.Q[None], model.Theta[None])
    _, g = _latent_grad(loss, *args, tau[None], y[None], model.d)
    fd = central_diff(lambda t: projection_value(model, y, loss, t), tau)
    assert rel_err(g[0], fd) < 1e-5


def test_idempotence():
    rng = np.random.default_rng(4)
    model = random_model(rng, theta_scale=0.3)
    y = rng.standard_normal(5)
    first = project(model, y, L2SQ, CFG)
    second = project(model, first.y_hat, L2SQ, CFG)
    np.testing.assert_allclose(second.y_hat, first.y_hat, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_l2_and_l2sq_share_minimizers(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, D=4, d=1, s=1, theta_scale=0.3)
    y = evaluate(model, rng.standard_normal(1)) + 0.3 * rng.standard_normal(4)
    a = project(model, y, L2SQ, CFG)
    b = project(model, y, LossSpec("l2"), CFG)
    if a.converged and b.converged and np.linalg.norm(a.y_hat - y) > 1e-3:
        np.testing.assert_allclose(a.tau, b.tau, atol=1e-4)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), p=st.sampled_from([1.5, 1.8, 2.0]))
def test_hessian_at_solution_inside_ball_is_psd(seed, p):
    rng = np.random.default_rng(seed)
    model = random_model(rng, D=4, d=1, s=1, theta_scale=0.2)
    y = evaluate(model, rng.standard_normal(1)) + 0.05 * rng.standard_normal(4)
    loss = LossSpec("lpp", p=p)
    res = project(model, y, loss, CFG)
    r = np.abs(res.y_hat - y)
    if np.any(r == 0):
        return
    rho = (r ** (p - 2)).min()
    cert = convexity_radius(p, rho, 1.0, max_slice_norm(model))
    if (r ** (p - 1)).sum() ** (1 / (p - 1)) <= cert.r_p:
        assert np.linalg.eigvalsh(hessian_tau(model, y, res.tau, loss))[0] >= -1e-8
