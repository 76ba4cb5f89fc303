import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_diff, random_model, rel_err, weiszfeld
from scqm.analysis import (
    SingularHessianError,
    convexity_radius,
    frechet_mean,
    hessian_tau,
    l2_sensitivity_decomposition,
    max_slice_norm,
    sensitivity,
    sensitivity_check,
    sensitivity_terms,
    verify_convexity_ball,
)
from scqm.losses import LossSpec, loss_hessian
from scqm.optimizer import grad_tau
from scqm.quadmap import QuadraticModel, evaluate, jacobian_tau, theta_to_tensor

L2SQ = LossSpec("l2sq")
L2 = LossSpec("l2")


def parabola(a=1.0):
    return QuadraticModel(c=np.zeros(2), Q=np.eye(2), Theta=np.array([[a]]), d=1)


def latent_grad(model, x, tau, loss):
    return grad_tau(model, np.asarray(tau)[:, None], x[:, None], loss)[:, 0]


# --- latent Hessian ---------------------------------------------------------


def test_hessian_linear_l2sq_is_2I():
    rng = np.random.default_rng(0)
    model = random_model(rng).linear()
    H = hessian_tau(model, rng.standard_normal(5), rng.standard_normal(2), L2SQ)
    np.testing.assert_allclose(H, 2 * np.eye(2), atol=1e-14)


def test_hessian_zero_residual_drops_curvature():
    rng = np.random.default_rng(1)
    model = random_model(rng)
    tau = rng.standard_normal(2)
    x = evaluate(model, tau)
    for loss in (L2SQ, LossSpec("huber", delta=1.0)):
        J = jacobian_tau(model, tau)
        ref = J.T @ loss_hessian(loss, np.zeros(5)) @ J
        np.testing.assert_allclose(hessian_tau(model, x, tau, loss), ref, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("loss", [LossSpec("lpp", p=1.8), L2SQ, LossSpec("huber", delta=1.0)])
def test_hessian_matches_finite_differences(seed, loss):
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    x = rng.standard_normal(5)
    tau = rng.standard_normal(2)
    fd = central_diff(lambda t: latent_grad(model, x, t, loss), tau)
    assert rel_err(hessian_tau(model, x, tau, loss), fd) < 1e-4


def test_hessian_parabola_closed_form():
    # l(tau) = tau^2 + (tau^2 - h)^2 has l'' = 2 + 12 tau^2 - 4h
    h, tau = 2.0, 0.3
    H = hessian_tau(parabola(), np.array([0.0, h]), np.array([tau]), L2SQ)
    assert H[0, 0] == pytest.approx(2 + 12 * tau**2 - 4 * h, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), p=st.floats(1.2, 2.0))
def test_hessian_symmetric(seed, p):
    rng = np.random.default_rng(seed)
    model = random_model(rng, theta_scale=3.0)
    H = hessian_tau(model, rng.standard_normal(5), rng.standard_normal(2), LossSpec("lpp", p=p))
    assert np.linalg.norm(H - H.T) < 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.0, 10.0))
def test_jacobian_singular_values_at_least_one(seed, scale):
    rng = np.random.default_rng(seed)
    model = random_model(rng, theta_scale=scale)
    J = jacobian_tau(model, 3 * rng.standard_normal(2))
    assert np.linalg.svd(J, compute_uv=False).min() >= 1 - 1e-9


def test_hessian_dimension_mismatch():
    with pytest.raises(ValueError):
        hessian_tau(parabola(), np.zeros(3), np.zeros(1), L2SQ)


# --- convexity radius -------------------------------------------------------


def test_radius_examples():
    assert convexity_radius(2.0, 1.0, 1.0, 0.5).r_p == pytest.approx(1.0)
    assert convexity_radius(1.5, 0.5, 1.0, 1.0).r_p == pytest.approx(0.015625)
    assert convexity_radius(1.8, 1.0, 1.0, 0.0).r_p == float("inf")


@pytest.mark.parametrize(
    "args",
    [(1.0, 1.0, 1.0, 1.0), (2.5, 1.0, 1.0, 1.0), (1.5, 0.0, 1.0, 1.0), (1.5, 1.0, 0.0, 1.0), (1.5, 1.0, 1.0, -1.0)],
)
def test_radius_rejects_bad_input(args):
    with pytest.raises(ValueError):
        convexity_radius(*args)


@settings(max_examples=50, deadline=None)
@given(
    p=st.floats(1.05, 2.0),
    rho=st.floats(1e-3, 10.0),
    sigma0=st.floats(0.1, 3.0),
    A0=st.floats(1e-3, 10.0),
)
def test_radius_formula(p, rho, sigma0, A0):
    cert = convexity_radius(p, rho, sigma0, A0)
    ref = ((p - 1) * rho * sigma0**2 / (2 * A0)) ** (1 / (p - 1))
    assert cert.r_p == pytest.approx(ref, rel=1e-12)
    assert (cert.p, cert.rho, cert.sigma0, cert.A0) == (p, rho, sigma0, A0)


def test_max_slice_norm():
    rng = np.random.default_rng(2)
    model = random_model(rng, d=2, s=2)
    A = theta_to_tensor(model.Theta, 2)
    ref = max(np.abs(np.linalg.eigvalsh(a)).max() for a in A)
    assert max_slice_norm(model) == pytest.approx(ref, rel=1e-12)
    assert max_slice_norm(model.linear()) == 0.0


def test_verify_linear_model_all_convex():
    rng = np.random.default_rng(3)
    model = random_model(rng).linear()
    cert = verify_convexity_ball(model, rng.standard_normal(5), LossSpec("lpp", p=1.5), 200, rng=0)
    assert cert.r_p == float("inf")
    assert cert.samples_checked == 200
    assert cert.min_eig_observed >= -1e-10


def test_verify_near_curve_holds():
    model = parabola()
    x = evaluate(model, np.array([0.4])) + np.array([1e-3, -2e-3])
    cert = verify_convexity_ball(model, x, LossSpec("lpp", p=1.8), 500, rng=1, scale=1e-3)
    assert cert.samples_checked > 0
    assert cert.min_eig_observed >= -1e-8
    assert cert.holds


def test_verify_far_point_shows_negative_curvature_outside():
    model = parabola()
    x = np.array([0.0, 3.0])  # beyond the focal point, tau = 0 is a local max
    cert = verify_convexity_ball(model, x, LossSpec("lpp", p=2.0), 500, rng=2, center=[0.0], scale=0.3)
    assert cert.n_outside > 0
    assert cert.min_eig_outside < 0
    assert cert.holds


def test_verify_rejects_non_lpp():
    with pytest.raises(ValueError):
        verify_convexity_ball(parabola(), np.zeros(2), L2SQ, 10)
    with pytest.raises(ValueError):
        verify_convexity_ball(parabola(), np.zeros(2), LossSpec("lpp", p=1.0), 10)


def test_certificate_to_dict():
    d = convexity_radius(2.0, 1.0, 1.0, 0.5).to_dict()
    assert d["r_p"] == 1.0 and d["holds"] is True
    assert d["min_eig_observed"] is None


@settings(max_examples=20, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    p=st.sampled_from([1.5, 1.8, 2.0]),
    d=st.integers(1, 2),
    s=st.integers(1, 2),
)
def test_certificate_property(seed, p, d, s):
    rng = np.random.default_rng(seed)
    model = random_model(rng, D=d + s + 1, d=d, s=s, theta_scale=1.0)
    x = evaluate(model, rng.standard_normal(d)) + 0.05 * rng.standard_normal(d + s + 1)
    cert = verify_convexity_ball(model, x, LossSpec("lpp", p=p), 300, rng=rng, scale=0.05)
    assert cert.samples_checked + cert.n_outside + cert.n_skipped == 300
    if cert.samples_checked:
        assert cert.min_eig_observed >= -1e-8


# --- Frechet mean -----------------------------------------------------------


def test_frechet_l2sq_is_mean():
    X = np.random.default_rng(4).standard_normal((3, 11))
    res = frechet_mean(X, L2SQ)
    np.testing.assert_allclose(res.c, X.mean(axis=1), atol=1e-10)
    assert res.converged


@pytest.mark.parametrize("seed", range(4))
def test_frechet_l1_is_median(seed):
    X = np.random.default_rng(seed).standard_normal((3, 9))
    res = frechet_mean(X, LossSpec("l1"))
    np.testing.assert_allclose(res.c, np.sort(X, axis=1)[:, 4], atol=1e-12)
    assert res.converged


def test_frechet_l1_one_dimensional():
    X = np.array([[5.0, -1.0, 2.0, 100.0, 0.5]])
    assert frechet_mean(X, LossSpec("l1")).c[0] == 2.0


def test_frechet_l2_triangle_matches_weiszfeld():
    X = np.array([[0.0, 1.0, 0.4], [0.0, 0.0, 0.8]])
    res = frechet_mean(X, L2)
    np.testing.assert_allclose(res.c, weiszfeld(X), atol=1e-6)


def test_frechet_l2_random_cloud_matches_weiszfeld():
    X = np.random.default_rng(5).standard_normal((4, 15))
    res = frechet_mean(X, L2)
    np.testing.assert_allclose(res.c, weiszfeld(X), atol=1e-6)
    assert res.converged


@pytest.mark.parametrize("loss", [LossSpec("lpp", p=1.5), LossSpec("huber", delta=0.5)])
def test_frechet_gradient_small(loss):
    X = np.random.default_rng(6).standard_normal((3, 20))
    res = frechet_mean(X, loss)
    assert res.converged
    assert res.grad_norm < 1e-10


def test_frechet_translation_equivariance():
    X = np.random.default_rng(7).standard_normal((2, 10))
    shift = np.array([3.0, -1.0])
    a = frechet_mean(X, LossSpec("lpp", p=1.5)).c
    b = frechet_mean(X + shift[:, None], LossSpec("lpp", p=1.5)).c
    np.testing.assert_allclose(b - a, shift, atol=1e-8)


def test_frechet_bad_input():
    with pytest.raises(ValueError):
        frechet_mean(np.zeros(3), L2SQ)


# --- sensitivity ------------------------------------------------------------


def test_sensitivity_l2sq_is_mean_shift():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((3, 12))
    dX = rng.standard_normal((3, 12))
    np.testing.assert_allclose(sensitivity(X, L2SQ, dX), dX.mean(axis=1), atol=1e-12)


@pytest.mark.parametrize("loss", [L2SQ, LossSpec("lpp", p=1.5), L2, LossSpec("huber", delta=0.5)])
def test_sensitivity_translation(loss):
    rng = np.random.default_rng(9)
    X = rng.standard_normal((3, 12))
    delta = rng.standard_normal(3)
    dX = np.repeat(delta[:, None], 12, axis=1)
    np.testing.assert_allclose(sensitivity(X, loss, dX), delta, atol=1e-10)


@pytest.mark.parametrize("loss", [L2SQ, LossSpec("lpp", p=1.5), L2])
def test_sensitivity_matches_resolve(loss):
    rng = np.random.default_rng(10)
    X = rng.standard_normal((3, 10))
    dX = 1e-4 * rng.standard_normal((3, 10))
    report = sensitivity_check(X, loss, dX)
    assert report.converged
    assert report.rel_error < 1e-2


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(-5, 5), b=st.floats(-5, 5))
def test_sensitivity_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((2, 8))
    loss = LossSpec("lpp", p=1.5)
    c = frechet_mean(X, loss).c
    d1, d2 = rng.standard_normal((2, 2, 8))
    s = lambda d: sensitivity(X, loss, d, c_star=c)
    lhs = s(a * d1 + b * d2)
    rhs = a * s(d1) + b * s(d2)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * max(1.0, np.linalg.norm(rhs))


def test_sensitivity_terms_sum():
    rng = np.random.default_rng(11)
    X = rng.standard_normal((3, 9))
    dX = rng.standard_normal((3, 9))
    loss = LossSpec("lpp", p=1.7)
    c = frechet_mean(X, loss).c
    np.testing.assert_allclose(
        sensitivity_terms(X, loss, dX, c).sum(axis=1), sensitivity(X, loss, dX, c_star=c), atol=1e-12
    )


def test_sensitivity_l1_is_singular():
    X = np.random.default_rng(12).standard_normal((2, 7))
    with pytest.raises(SingularHessianError):
        sensitivity(X, LossSpec("l1"), np.zeros_like(X))


def test_sensitivity_collinear_l2_is_singular():
    X = np.array([[-2.0, -1.0, 1.0, 2.0], [0.0, 0.0, 0.0, 0.0]])
    with pytest.raises(SingularHessianError):
        sensitivity(X, L2, np.zeros_like(X), c_star=np.zeros(2))


def test_sensitivity_shape_check():
    X = np.zeros((2, 5))
    with pytest.raises(ValueError):
        sensitivity(X, L2SQ, np.zeros((2, 4)))


# --- l2 decomposition -------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_l2_decomposition_agrees_with_generic(seed):
    rng = np.random.default_rng(20 + seed)
    X = rng.standard_normal((3, 10))
    dX = rng.standard_normal((3, 10))
    c = frechet_mean(X, L2).c
    a = l2_sensitivity_decomposition(X, dX, c_star=c)
    b = sensitivity(X, L2, dX, c_star=c)
    assert np.linalg.norm(a - b) < 1e-10 * max(1.0, np.linalg.norm(b))


def test_l2_residual_parallel_perturbation_is_annihilated():
    rng = np.random.default_rng(13)
    X = rng.standard_normal((3, 10))
    c = frechet_mean(X, L2).c
    R = X - c[:, None]
    kappa = rng.uniform(-1, 1, 10)
    assert np.linalg.norm(l2_sensitivity_decomposition(X, kappa * R, c_star=c)) < 1e-10
    assert np.linalg.norm(sensitivity(X, L2, kappa * R, c_star=c)) < 1e-10


def test_l2_outlier_weight_shrinks():
    rng = np.random.default_rng(14)
    base = rng.standard_normal((2, 12))
    direction = np.array([1.0, 0.0])

    def outlier_term(dist):
        X = np.hstack([base, (dist * direction)[:, None]])
        c = frechet_mean(X, L2).c
        r = X[:, -1] - c
        perp = np.array([-r[1], r[0]]) / np.linalg.norm(r)
        dX = np.zeros_like(X)
        dX[:, -1] = perp
        return np.linalg.norm(sensitivity_terms(X, L2, dX, c)[:, -1]), np.linalg.norm(r)

    near, r_near = outlier_term(5.0)
    far, r_far = outlier_term(50.0)
    # contribution scales with 1/||r|| up to the mild change of the total H
    assert near / far == pytest.approx(r_far / r_near, rel=0.1)
    assert 8 < near / far < 12


def test_l2_decomposition_rejects_small_residual():
    X = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    with pytest.raises(ValueError):
        l2_sensitivity_decomposition(X, np.zeros_like(X), c_star=np.zeros(2))
