import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from avdgp import adcore as ad
from avdgp import gpmath as gm
from avdgp.adcore import CholeskyError


def _matern_oracle(r, ls=1.0, var=1.0):
    a = math.sqrt(5.0) * r / ls
    return var * (1 + a + a * a / 3) * math.exp(-a)


# -- kernel -----------------------------------------------------------------


def test_matern_at_zero_distance_is_variance():
    K = gm.matern52(np.zeros((1, 2)), np.zeros((1, 2)), gm.KernelParams(0.3, math.log(2.5))).value
    assert K[0, 0] == pytest.approx(2.5, rel=1e-15)


def test_matern_at_one_lengthscale():
    ls = 1.7
    K = gm.matern52(np.array([[0.0]]), np.array([[ls]]), gm.KernelParams(math.log(ls), 0.0)).value
    # closed form (1 + sqrt5 + 5/3) exp(-sqrt5)
    assert K[0, 0] == pytest.approx(0.5239941088318203, abs=1e-12)


def test_matern_matches_closed_form_on_random_points():
    rng = np.random.default_rng(0)
    X1, X2 = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    K = gm.matern52(X1, X2, gm.KernelParams(math.log(0.8), math.log(1.3))).value
    for i in range(4):
        for j in range(5):
            assert K[i, j] == pytest.approx(_matern_oracle(np.linalg.norm(X1[i] - X2[j]), 0.8, 1.3), rel=1e-13)


def test_matern_batched_broadcast():
    rng = np.random.default_rng(1)
    X1, Z = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 5, 2))
    K = gm.matern52(X1, Z, gm.KernelParams()).value
    assert K.shape == (3, 4, 5)
    np.testing.assert_allclose(K[1], gm.matern52(X1[1], Z[1], gm.KernelParams()).value, rtol=0, atol=0)


def test_kernel_gram_admits_cholesky_with_jitter():
    rng = np.random.default_rng(2)
    for _ in range(20):
        X = rng.normal(size=(15, 2))
        K = gm.matern52(X, X, gm.KernelParams()).value + 1e-6 * np.eye(15)
        np.linalg.cholesky(K)


def test_kernel_hyperparameter_gradients():
    rng = np.random.default_rng(3)
    X1, X2 = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    W = rng.normal(size=(3, 4))
    f = lambda ll, lv: ad.sum(gm.matern52(X1, X2, gm.KernelParams(ll, lv)) * W)
    assert ad.check_gradient(f, [np.array(0.3), np.array(-0.4)]) < 1e-5


def test_jitter_escalates_then_fails():
    # rank-one PSD matrix needs jitter; a negative-definite one cannot be fixed
    v = np.array([1.0, 1.0, 1.0])
    L = gm.jittered_cholesky(np.outer(v, v)).value
    assert np.all(np.isfinite(L))
    with pytest.raises(CholeskyError, match="layer 7"):
        gm.jittered_cholesky(-np.eye(3), context="layer 7")


# -- conditional ------------------------------------------------------------


def _dense_conditional(mf, Kff, Kfu, Kuu, q_mu, S, mu_u):
    Ki = np.linalg.inv(Kuu)
    A = Kfu @ Ki
    mean = mf + A @ (q_mu - mu_u)
    cov = Kff - A @ Kfu.T + A @ S @ A.T
    return mean, np.diag(cov)


def _random_instance(rng, N=3, M=2, full=False):
    X = rng.normal(size=(N, 1))
    Z = rng.normal(size=(M, 1)) * 1.5
    kp = gm.KernelParams(math.log(1.2), math.log(0.9))
    Kuu = gm.matern52(Z, Z, kp).value + 1e-6 * 0.9 * np.eye(M)
    Kfu = gm.matern52(X, Z, kp).value
    Kff = gm.matern52(X, X, kp).value
    W = rng.normal(size=(1, 1))
    mf, mu_u = X @ W, Z @ W
    q_mu = rng.normal(size=(1, M))
    if full:
        q_sqrt = np.tril(rng.normal(size=(1, M, M)), -1) + np.diag(rng.uniform(0.3, 1.0, M))[None]
    else:
        q_sqrt = rng.uniform(0.3, 1.0, size=(1, M))
    return mf, Kff, Kfu, Kuu, q_mu, q_sqrt, mu_u


@pytest.mark.parametrize("full", [False, True])
def test_conditional_matches_dense_oracle(full):
    rng = np.random.default_rng(4)
    for _ in range(10):
        mf, Kff, Kfu, Kuu, q_mu, q_sqrt, mu_u = _random_instance(rng, full=full)
        out = gm.conditional(mf, np.diag(Kff), Kfu, Kuu, q_mu, q_sqrt, mu_u, chol=np.linalg.cholesky(Kuu))
        Lq = q_sqrt[0] if full else np.diag(q_sqrt[0])
        mean, var = _dense_conditional(mf[:, 0], Kff, Kfu, Kuu, q_mu[0], Lq @ Lq.T, mu_u[:, 0])
        np.testing.assert_allclose(out.mean.value[:, 0], mean, atol=1e-10)
        np.testing.assert_allclose(out.var.value[:, 0], var, atol=1e-10)


def test_conditional_full_covariance_matches_oracle():
    rng = np.random.default_rng(5)
    mf, Kff, Kfu, Kuu, q_mu, q_sqrt, mu_u = _random_instance(rng, N=4, M=3, full=True)
    out = gm.conditional_full(mf, Kff, Kfu, Kuu, q_mu, q_sqrt, mu_u)
    Ki = np.linalg.inv(Kuu + np.eye(3) * 1e-6 * np.mean(np.diag(Kuu)))
    A = Kfu @ Ki
    Lq = q_sqrt[0]
    cov = Kff - A @ Kfu.T + A @ Lq @ Lq.T @ A.T
    np.testing.assert_allclose(out.cov.value[0], cov, atol=1e-8)


def test_conditional_at_prior_reproduces_prior():
    rng = np.random.default_rng(6)
    for _ in range(100):
        mf, Kff, Kfu, Kuu, _, _, mu_u = _random_instance(rng)
        q_sqrt = np.linalg.cholesky(Kuu)[None]
        out = gm.conditional(mf, np.diag(Kff), Kfu, Kuu, mu_u.T, q_sqrt, mu_u, chol=q_sqrt[0])
        np.testing.assert_allclose(out.mean.value, mf, atol=1e-10)
        np.testing.assert_allclose(out.var.value[:, 0], np.diag(Kff), atol=1e-10)


def test_conditional_with_zero_covariance_gives_projected_variance():
    rng = np.random.default_rng(7)
    mf, Kff, Kfu, Kuu, _, _, mu_u = _random_instance(rng)
    out = gm.conditional(mf, np.diag(Kff), Kfu, Kuu, mu_u.T, np.zeros((1, 2)), mu_u, chol=np.linalg.cholesky(Kuu))
    tilde = np.diag(Kff - Kfu @ np.linalg.inv(Kuu) @ Kfu.T)
    np.testing.assert_allclose(out.mean.value, mf, atol=1e-12)
    np.testing.assert_allclose(out.var.value[:, 0], tilde, atol=1e-10)


# -- KL ---------------------------------------------------------------------


def _kl_oracle(m_q, S_q, m_p, S_p):
    k = len(m_q)
    Pi = np.linalg.inv(S_p)
    d = m_p - m_q
    return 0.5 * (np.trace(Pi @ S_q) + d @ Pi @ d - k + np.log(np.linalg.det(S_p) / np.linalg.det(S_q)))


def test_kl_examples():
    one = np.ones((1, 1))
    assert float(gm.gauss_kl(np.ones((1, 1)), one, None, one).value) == pytest.approx(0.5, abs=1e-15)
    assert float(gm.gauss_kl(np.zeros((1, 1)), one, None, one).value) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("full", [False, True])
def test_kl_matches_dense_oracle(full):
    rng = np.random.default_rng(8)
    for _ in range(10):
        A = rng.normal(size=(3, 3))
        S_p = A @ A.T + 0.5 * np.eye(3)
        Lp = np.linalg.cholesky(S_p)
        m_q, m_p = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        if full:
            Lq = np.tril(rng.normal(size=(3, 3)), -1) + np.diag(rng.uniform(0.3, 1.5, 3))
            q_sqrt = Lq[None]
        else:
            q_sqrt = rng.uniform(0.3, 1.5, size=(1, 3))
            Lq = np.diag(q_sqrt[0])
        kl = float(gm.gauss_kl(m_q, q_sqrt, m_p, Lp).value)
        assert kl == pytest.approx(_kl_oracle(m_q[0], Lq @ Lq.T, m_p[0], S_p), abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_kl_is_non_negative_and_zero_at_equality(M, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(M, M))
    Lp = np.linalg.cholesky(A @ A.T + 0.5 * np.eye(M))
    m = rng.normal(size=(2, M))
    assert float(gm.gauss_kl(m, np.broadcast_to(Lp, (2, M, M)), m, Lp).value) == pytest.approx(0.0, abs=1e-12)
    q = rng.uniform(0.1, 2.0, size=(2, M))
    assert float(gm.gauss_kl(rng.normal(size=(2, M)), q, m, Lp).value) >= 0.0


def test_kl_rejects_non_positive_factor():
    with pytest.raises(ValueError):
        gm.gauss_kl(np.zeros((1, 2)), np.array([[1.0, 0.0]]), None, np.eye(2))


# -- quadrature and likelihoods ---------------------------------------------


def test_gauss_hermite_polynomial_exactness():
    assert gm.gauss_hermite_expect(lambda t: t, 0.7, 2.0) == pytest.approx(0.7, abs=1e-13)
    assert gm.gauss_hermite_expect(lambda t: t * t, 0.7, 2.0) == pytest.approx(0.49 + 2.0, abs=1e-12)


def test_gauss_hermite_gaussian_loglik_matches_closed_form():
    rng = np.random.default_rng(9)
    y, m = rng.normal(size=20), rng.normal(size=20)
    v, s2 = rng.uniform(0.01, 2.0, 20), rng.uniform(0.05, 1.0, 20)
    gh = gm.gauss_hermite_expect(lambda f: gm.gaussian_log_density(np.broadcast_to(y[:, None], f.shape), f, np.broadcast_to(s2[:, None], f.shape)), m, v).value
    closed = stats.norm.logpdf(y, m, np.sqrt(s2)) - v / (2 * s2)
    np.testing.assert_allclose(gh, closed, atol=1e-8)
    np.testing.assert_allclose(gm.gaussian_expected_loglik(y, m, v, s2).value, closed, atol=1e-12)


def test_bernoulli_expected_loglik_matches_monte_carlo():
    mu, var = 0.3, 0.5
    gh = float(gm.bernoulli_expected_loglik(np.array([1.0]), np.array([mu]), np.array([var]), 20).value[0])
    f = np.random.default_rng(10).normal(mu, math.sqrt(var), size=1_000_000)
    samples = stats.norm.logcdf(f)
    se = samples.std() / math.sqrt(len(samples))
    assert abs(gh - samples.mean()) < 3 * se


def test_bernoulli_predictive_closed_form_matches_quadrature():
    m, v = np.array([-1.0, 0.2, 2.0]), np.array([0.1, 1.0, 3.0])
    quad = gm.gauss_hermite_expect(lambda f: gm.probit(f), m, v, 60).value
    np.testing.assert_allclose(gm.bernoulli_predictive(m, v), quad, atol=1e-12)


def test_probit_values():
    assert float(gm.probit(0.0).value) == 0.5
    assert 1.0 - float(gm.probit(10.0).value) < 1e-16
    assert float(gm.probit(1.0).value) == pytest.approx(0.8413447460685429, abs=1e-15)
    assert float(gm.log_probit(-40.0).value) == pytest.approx(stats.norm.logcdf(-40.0), rel=1e-12)


def test_mean_functions():
    X = np.arange(6.0).reshape(3, 2)
    assert np.all(gm.MeanFn("zero", None, 3)(X).value == 0) and gm.MeanFn("zero", None, 3)(X).shape == (3, 3)
    W = gm.identity_padded(2, 3)
    np.testing.assert_array_equal(gm.MeanFn("linear", W, 3)(X).value, np.column_stack([X, np.zeros(3)]))
