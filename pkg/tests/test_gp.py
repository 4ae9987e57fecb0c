import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lccvae.gp import (GpNumericalError, KernelParams, gp_fit_exact, gp_fit_sparse, gp_predict,
                       init_kernel_params, jittered_cholesky, log_marginal_likelihood, rbf_kernel, rbf_matrix,
                       refit_with_targets, sparse_elbo)

from oracles import central_diff, dense_gp_posterior, dense_log_marginal, rel_err

seeds = st.integers(0, 2**32 - 1)


def random_problem(n=20, D=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, D))
    t = np.sin(X @ rng.standard_normal(D)) + 0.1 * rng.standard_normal(n)
    return X, t


# --- kernel ---------------------------------------------------------------------------

def test_rbf_closed_forms():
    p = KernelParams(1.0, 1.0, 0.1)
    a = np.array([0.3, -1.2])
    assert rbf_kernel(a, a, KernelParams(0.7, 2.5, 0.1)) == 2.5
    assert rbf_kernel([0.0, 0.0], [1.0, 1.0], p) == pytest.approx(math.exp(-1), abs=1e-15)
    assert rbf_kernel([0.0, 0.0], [1.0, 1.0], p) == pytest.approx(0.367879, abs=1e-6)
    far = KernelParams(0.5, 3.0, 0.1)
    assert rbf_kernel([0.0], [5.0], far) < 2e-22 * 3.0


def test_rbf_dimension_mismatch():
    with pytest.raises(ValueError):
        rbf_kernel([0.0, 1.0], [0.0], KernelParams())


def test_kernel_params_must_be_positive():
    with pytest.raises(ValueError):
        KernelParams(1.0, 0.0, 0.1)


def test_matrix_agrees_with_pairwise_kernel():
    X, _ = random_problem(6, 3)
    p = KernelParams(0.8, 1.7, 0.1)
    K = rbf_matrix(X, X, p.lengthscale, p.signal_variance)
    expected = [[rbf_kernel(a, b, p) for b in X] for a in X]
    np.testing.assert_allclose(K, expected, rtol=1e-12)


def test_init_heuristic():
    X = np.array([[0.0], [1.0], [3.0]])
    t = np.array([1.0, 2.0, 6.0])
    p = init_kernel_params(X, t)
    assert p.lengthscale == 2.0
    assert p.signal_variance == pytest.approx(np.var(t))
    assert p.noise_variance == pytest.approx(0.01 * np.var(t))


# --- Cholesky ---------------------------------------------------------------------------

def test_jitter_rescues_a_singular_kernel():
    X = np.array([[0.0], [0.0], [1.0]])
    K = rbf_matrix(X, X, 1.0, 1.0)
    L, jitter = jittered_cholesky(K)
    assert 0 < jitter <= 1e-4
    np.testing.assert_allclose(L @ L.T, K + jitter * np.eye(3), atol=1e-12)


def test_cholesky_failure_carries_diagnostics():
    with pytest.raises(GpNumericalError, match="cond="):
        jittered_cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


# --- exact GP ---------------------------------------------------------------------------

def test_single_zero_target():
    gp = gp_fit_exact(np.array([[0.5, 0.5]]), np.array([0.0]))
    mean, _ = gp_predict(gp, [[0.5, 0.5]])
    assert mean[0] == 0.0


def test_log_marginal_likelihood_matches_dense_oracle():
    X, t = random_problem(15, 3, seed=1)
    theta = np.log([0.9, 1.3, 0.05])
    value, grad = log_marginal_likelihood(X, t, theta)
    assert value == pytest.approx(dense_log_marginal(X, t, *np.exp(theta)), rel=1e-10)
    numeric = central_diff(lambda th: dense_log_marginal(X, t, *np.exp(th)), theta, range(3))
    assert np.max(rel_err(grad, numeric)) <= 1e-4


@settings(max_examples=30)
@given(seed=seeds, n=st.integers(2, 25))
def test_log_marginal_likelihood_gradient_property(seed, n):
    X, t = random_problem(n, 3, seed)
    rng = np.random.default_rng(seed)
    theta = np.log([rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.02, 0.5)])
    _, grad = log_marginal_likelihood(X, t, theta)
    numeric = central_diff(lambda th: log_marginal_likelihood(X, t, th)[0], theta, range(3))
    assert np.max(rel_err(grad, numeric, floor=1e-6)) <= 1e-4


def test_fitting_increases_the_evidence():
    X, t = random_problem(30, 3, seed=2)
    gp = gp_fit_exact(X, t, steps=200)
    start = log_marginal_likelihood(X, t, init_kernel_params(X, t).log_params)[0]
    end = log_marginal_likelihood(X, t, gp.params.log_params)[0]
    assert end > start
    assert len(gp.trace) == 200


def test_interpolation_limit():
    X, t = random_problem(10, 3, seed=3)
    init = init_kernel_params(X, t)
    gp = gp_fit_exact(X, t, KernelParams(init.lengthscale, init.signal_variance, 1e-8), optimize=False)
    mean, var = gp_predict(gp, X)
    assert np.max(np.abs(mean - t)) < 1e-3
    assert np.max(var) < 1e-6


def test_prior_reversion_far_from_data():
    X, t = random_problem(10, 3, seed=4)
    gp = gp_fit_exact(X, t, KernelParams(0.5, 2.0, 0.01), optimize=False)
    mean, var = gp_predict(gp, np.full((1, 3), 100.0))
    assert abs(mean[0]) < 1e-12
    assert var[0] == pytest.approx(2.0, abs=1e-12)


def test_predictions_match_dense_inverse_oracle():
    X, t = random_problem(20, 4, seed=5)
    p = KernelParams(1.1, 0.8, 0.03)
    gp = gp_fit_exact(X, t, p, optimize=False)
    Xs = np.random.default_rng(6).standard_normal((15, 4))
    mean, var = gp_predict(gp, Xs)
    m_ref, v_ref = dense_gp_posterior(X, t, Xs, p.lengthscale, p.signal_variance, p.noise_variance)
    np.testing.assert_allclose(mean, m_ref, rtol=0, atol=1e-8)
    np.testing.assert_allclose(var, v_ref, rtol=0, atol=1e-8)


def test_query_dimension_mismatch():
    X, t = random_problem(5, 3)
    with pytest.raises(ValueError, match="dimension"):
        gp_predict(gp_fit_exact(X, t, optimize=False), np.zeros((1, 2)))


def test_non_finite_training_data_rejected():
    X, t = random_problem(5, 3)
    t[2] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        gp_fit_exact(X, t)


@settings(max_examples=30)
@given(seed=seeds, a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_posterior_mean_is_linear_in_targets(seed, a, b):
    X, t = random_problem(12, 3, seed)
    s = np.random.default_rng(seed + 1).standard_normal(12)
    Xs = np.random.default_rng(seed + 2).standard_normal((5, 3))
    for gp in (gp_fit_exact(X, t, steps=5), gp_fit_sparse(X, t, 6, seed=seed, steps=5)):
        combo = refit_with_targets(gp, a * t + b * s)
        lhs = gp_predict(combo, Xs)[0]
        rhs = a * gp_predict(refit_with_targets(gp, t), Xs)[0] + b * gp_predict(refit_with_targets(gp, s), Xs)[0]
        np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(rhs).max()))


@settings(max_examples=30)
@given(seed=seeds)
def test_posterior_variance_never_exceeds_prior(seed):
    X, t = random_problem(15, 3, seed)
    Xs = np.random.default_rng(seed).standard_normal((10, 3)) * 2
    for gp in (gp_fit_exact(X, t, steps=10), gp_fit_sparse(X, t, 5, seed=seed, steps=10)):
        _, var = gp_predict(gp, Xs)
        assert np.all(var <= gp.params.signal_variance + 1e-9)
        assert np.all(var >= 0)


# --- sparse GP ------------------------------------------------------------------------------

def test_sparse_with_all_inducing_points_is_exact():
    X, t = random_problem(20, 4, seed=7)
    p = KernelParams(1.2, 0.9, 0.05)
    bound, trace, _, _ = sparse_elbo(X, t, X, p.log_params)
    exact, _ = log_marginal_likelihood(X, t, p.log_params)
    assert bound == pytest.approx(exact, abs=1e-6)
    assert abs(trace) < 1e-6
    Xs = np.random.default_rng(8).standard_normal((10, 4))
    sp = gp_fit_sparse(X, t, 20, p, inducing=X, optimize=False)
    ex = gp_fit_exact(X, t, p, optimize=False)
    for a, b in zip(gp_predict(sp, Xs), gp_predict(ex, Xs)):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-6)


@settings(max_examples=50)
@given(seed=seeds, n=st.integers(3, 30), frac=st.floats(0.1, 0.9))
def test_sparse_bound_is_below_exact(seed, n, frac):
    X, t = random_problem(n, 3, seed)
    rng = np.random.default_rng(seed)
    m = max(1, int(frac * n))
    Z = X[rng.choice(n, m, replace=False)] + 0.1 * rng.standard_normal((m, 3))
    theta = np.log([rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(0.01, 0.5)])
    bound, trace, _, _ = sparse_elbo(X, t, Z, theta, with_grad=False)
    assert trace >= -1e-9
    assert bound <= log_marginal_likelihood(X, t, theta)[0] + 1e-6


def test_sparse_gradients_match_finite_differences():
    X, t = random_problem(40, 6, seed=9)
    Z = X[:20] + 0.05
    theta = np.log([1.4, 0.8, 0.05])
    _, _, g_theta, g_Z = sparse_elbo(X, t, Z, theta)
    num_theta = central_diff(lambda th: sparse_elbo(X, t, Z, th, False)[0], theta, range(3))
    num_Z = central_diff(lambda z: sparse_elbo(X, t, z, theta, False)[0], Z, range(Z.size))
    assert Z.size >= 100
    assert np.max(rel_err(g_theta, num_theta, floor=1e-6)) <= 1e-4
    assert np.max(rel_err(g_Z.reshape(-1), num_Z, floor=1e-6)) <= 1e-4


def test_sparse_fit_improves_bound_and_validates_m():
    X, t = random_problem(60, 3, seed=10)
    gp = gp_fit_sparse(X, t, 10, seed=0, steps=100)
    assert gp.trace[-1] > gp.trace[0]
    assert gp.inducing.shape == (10, 3)
    with pytest.raises(ValueError):
        gp_fit_sparse(X, t, 61)


def test_sparse_inducing_init_is_seeded():
    X, t = random_problem(30, 3, seed=11)
    a = gp_fit_sparse(X, t, 8, seed=3, optimize=False)
    b = gp_fit_sparse(X, t, 8, seed=3, optimize=False)
    np.testing.assert_array_equal(a.inducing, b.inducing)
    assert all(any(np.array_equal(z, x) for x in X) for z in a.inducing)
