"""Kernel, mean-function and Gaussian-calculus building blocks.

Everything here is written against :mod:`avdgp.adcore` so it is
differentiable, and accepts plain arrays where no gradient is needed.
Shapes follow one convention throughout: leading batch dimensions ``...``,
``N`` evaluation points, ``M`` inducing points, ``D`` output dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.special import ndtr

from . import _kernels
from . import adcore as ad
from .adcore import CholeskyError, Tensor

SQRT5 = math.sqrt(5.0)
JITTER = 1e-6
MAX_JITTER = 1e-2
DEFAULT_GH_POINTS = 20


@dataclass
class KernelParams:
    """Isotropic Matérn-5/2 hyperparameters on the log scale."""

    log_lengthscale: Tensor | float = 0.0
    log_variance: Tensor | float = 0.0

    @property
    def lengthscale(self) -> float:
        return float(np.exp(ad.value(self.log_lengthscale)))

    @property
    def variance(self) -> float:
        return float(np.exp(ad.value(self.log_variance)))


@dataclass
class MeanFn:
    """Zero or linear mean function ``m(X) = X W``."""

    kind: str = "zero"
    weights: Tensor | np.ndarray | None = None
    d_out: int = 1

    def __call__(self, X):
        X = X if isinstance(X, Tensor) else Tensor(X)
        if self.kind == "zero":
            return Tensor(np.zeros(X.shape[:-1] + (self.d_out,)))
        if self.kind == "linear":
            return ad.matmul(X, self.weights)
        raise ValueError(f"unknown mean function kind '{self.kind}'")


@dataclass
class GaussianMarginal:
    """Per-point marginals: ``mean`` and ``var`` shaped (..., N, D).

    ``cov`` holds full covariances (..., D, N, N) when requested.
    """

    mean: Tensor
    var: Tensor
    cov: Tensor | None = None


def identity_padded(d_in: int, d_out: int) -> np.ndarray:
    """Truncated / zero-padded identity used to initialise linear means."""
    return np.eye(d_in, d_out)


# ---------------------------------------------------------------------------
# kernel


def _stacked(X1, X2):
    """Broadcast the batch dims of both inputs and flatten them to one."""
    if X1.ndim < 2 or X2.ndim < 2 or X1.shape[-1] != X2.shape[-1]:
        raise ad.ShapeError(f"matern52: incompatible inputs {X1.shape} and {X2.shape}")
    try:
        batch = np.broadcast_shapes(X1.shape[:-2], X2.shape[:-2])
    except ValueError:
        raise ad.ShapeError(f"matern52: batch shapes of {X1.shape} and {X2.shape} do not broadcast") from None
    A = np.ascontiguousarray(np.broadcast_to(X1, batch + X1.shape[-2:])).reshape((-1,) + X1.shape[-2:])
    B = np.ascontiguousarray(np.broadcast_to(X2, batch + X2.shape[-2:])).reshape((-1,) + X2.shape[-2:])
    return batch, A, B


def _matern52_fwd(v, at):
    X1, X2, log_ls, log_var = v
    batch, A, B = _stacked(X1, X2)
    K = _kernels.matern52_fwd(A, B, float(np.exp(-2.0 * log_ls)), float(np.exp(log_var)))
    return K.reshape(batch + K.shape[1:]), None


def _matern52_bwd(g, saved, v, out, at):
    X1, X2, log_ls, log_var = v
    batch, A, B = _stacked(X1, X2)
    G = np.ascontiguousarray(g, dtype=np.float64).reshape((-1,) + g.shape[-2:])
    g1, g2, gs_s, gk = _kernels.matern52_bwd(G, A, B, float(np.exp(-2.0 * log_ls)), float(np.exp(log_var)))
    g1 = ad.unbroadcast(g1.reshape(batch + X1.shape[-2:]), X1.shape)
    g2 = ad.unbroadcast(g2.reshape(batch + X2.shape[-2:]), X2.shape)
    return [g1, g2, np.full(np.shape(log_ls), -2.0 * gs_s), np.full(np.shape(log_var), gk)]


ad.register_primitive("matern52", _matern52_fwd, _matern52_bwd)


def matern52(X1, X2, params: KernelParams):
    """Matérn-5/2 cross-covariance ``k(X1, X2)``, shape (..., N, M)."""
    return ad.apply("matern52", [X1, X2, params.log_lengthscale, params.log_variance])


def matern52_diag(X, params: KernelParams):
    """``k(x, x)`` for every row of ``X``; shape (..., N)."""
    shape = X.shape[:-1]
    return ad.exp(_t(params.log_variance)) * np.ones(shape)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Cholesky with jitter


def jittered_cholesky(K, context: str = ""):
    """Cholesky of ``K + j I`` with ``j`` escalated per matrix on failure.

    ``j`` starts at ``1e-6 * mean(diag K)`` and grows by 10x up to
    ``1e-2 * mean(diag K)``; past that a :class:`CholeskyError` is raised.
    The jitter stays on the tape, so it is differentiated along with K.
    """
    K = _t(K)
    m = K.shape[-1]
    batch = K.shape[:-2]
    scale = ad.mean(ad.diag_extract(K), axis=-1, keepdims=True)  # (..., 1)
    if not np.all(scale.value > 0):
        scale = Tensor(np.where(scale.value > 0, scale.value, 1.0))
    mult = np.full(batch + (1,), JITTER)
    flat = mult.reshape(-1)
    while True:
        J = ad.diag_embed(ad.broadcast(scale * mult, batch + (m,)))
        try:
            return ad.cholesky(K + J)
        except CholeskyError as e:
            b = e.batch_index
            if flat[b] * 10.0 > MAX_JITTER * (1 + 1e-9):
                raise CholeskyError(e.pivot, b, context) from None
            flat[b] *= 10.0


# ---------------------------------------------------------------------------
# marginal posterior and KL


def conditional(prior_mean_f, K_ff_diag, K_fu, K_uu, q_mu, q_sqrt, prior_mean_u=None,
                *, chol=None, chol_inv=None, diag_q=None) -> GaussianMarginal:
    """Marginal of ``f`` after integrating ``u ~ N(q_mu, q_sqrt q_sqrt^T)``.

    Parameters
    ----------
    prior_mean_f : (..., N, D) or None
        Prior mean at the evaluation points (None for zero).
    K_ff_diag : (..., N)
    K_fu : (..., N, M)
    K_uu : (..., M, M)
        Only used when ``chol`` is not supplied.
    q_mu : (..., D, M)
    q_sqrt : (..., D, M) diagonal factors or (..., D, M, M) lower factors.
    prior_mean_u : (..., M, D) or None
    chol, chol_inv : optional precomputed ``L = chol(K_uu)`` and ``L^{-1}``.
    diag_q : force the interpretation of ``q_sqrt``; inferred when None.

    Returns
    -------
    GaussianMarginal with mean and variance of shape (..., N, D).
    """
    K_fu, q_mu, q_sqrt = _t(K_fu), _t(q_mu), _t(q_sqrt)
    if chol_inv is None:
        if chol is None:
            chol = jittered_cholesky(K_uu)
        chol_inv = ad.tri_inverse(chol)
    if diag_q is None:
        diag_q = q_sqrt.ndim == q_mu.ndim
    D = q_mu.shape[-2]

    A = ad.matmul(chol_inv, ad.transpose(K_fu))  # (..., M, N)
    B = ad.matmul(ad.transpose(chol_inv), A)  # K_uu^{-1} K_uf
    Bt = ad.transpose(B)  # (..., N, M)

    delta = q_mu if prior_mean_u is None else q_mu - ad.transpose(prior_mean_u)
    mean = ad.matmul(Bt, ad.transpose(delta))  # (..., N, D)
    if prior_mean_f is not None:
        mean = mean + prior_mean_f

    tilde = _t(K_ff_diag) - ad.sum(ad.square(A), axis=-2)  # (..., N)
    tilde = ad.broadcast(ad.expand_dims(tilde, -1), mean.shape)
    if diag_q:
        corr = ad.matmul(ad.square(Bt), ad.transpose(ad.square(q_sqrt)))
    else:
        Bx = ad.broadcast(ad.expand_dims(B, -3), B.shape[:-2] + (D,) + B.shape[-2:])
        proj = ad.matmul(ad.transpose(q_sqrt), Bx)  # (..., D, M, N)
        corr = ad.transpose(ad.sum(ad.square(proj), axis=-2))
    return GaussianMarginal(mean, tilde + corr)


def conditional_full(prior_mean_f, K_ff, K_fu, K_uu, q_mu, q_sqrt, prior_mean_u=None) -> GaussianMarginal:
    """Like :func:`conditional` but also returns full covariances (..., D, N, N)."""
    K_fu, q_mu, q_sqrt, K_ff = _t(K_fu), _t(q_mu), _t(q_sqrt), _t(K_ff)
    chol = jittered_cholesky(K_uu)
    Linv = ad.tri_inverse(chol)
    diag_q = q_sqrt.ndim == q_mu.ndim
    D = q_mu.shape[-2]
    A = ad.matmul(Linv, ad.transpose(K_fu))
    B = ad.matmul(ad.transpose(Linv), A)
    tilde = K_ff - ad.matmul(ad.transpose(A), A)  # (..., N, N)
    if diag_q:
        Lq = ad.diag_embed(q_sqrt)
    else:
        Lq = q_sqrt
    Bx = ad.broadcast(ad.expand_dims(B, -3), B.shape[:-2] + (D,) + B.shape[-2:])
    proj = ad.matmul(ad.transpose(Lq), Bx)  # (..., D, M, N)
    cov = ad.broadcast(ad.expand_dims(tilde, -3), proj.shape[:-2] + tilde.shape[-2:]) \
        + ad.matmul(ad.transpose(proj), proj)
    marg = conditional(prior_mean_f, ad.diag_extract(K_ff), K_fu, None, q_mu, q_sqrt, prior_mean_u,
                       chol_inv=Linv, diag_q=diag_q)
    marg.cov = cov
    return marg


def gauss_kl(q_mu, q_sqrt, p_mean, p_chol, *, p_chol_inv=None, diag_q=None):
    """KL( N(q_mu, q_sqrt q_sqrt^T) || N(p_mean, p_chol p_chol^T) ).

    ``q_mu`` is (..., D, M); ``p_mean`` matches it or is None (zero);
    ``p_chol`` is (..., M, M) and shared across the D outputs.  The result
    is summed over D and keeps the leading batch dimensions.
    """
    q_mu, q_sqrt, p_chol = _t(q_mu), _t(q_sqrt), _t(p_chol)
    if diag_q is None:
        diag_q = q_sqrt.ndim == q_mu.ndim
    p_diag = np.diagonal(p_chol.value, axis1=-2, axis2=-1)
    if np.any(p_diag <= 0):
        raise ValueError("gauss_kl: prior Cholesky factor has non-positive diagonal")
    q_diag = q_sqrt.value if diag_q else np.diagonal(q_sqrt.value, axis1=-2, axis2=-1)
    if np.any(q_diag <= 0):
        raise ValueError("gauss_kl: variational factor has non-positive diagonal")

    D, M = q_mu.shape[-2], q_mu.shape[-1]
    Linv = p_chol_inv if p_chol_inv is not None else ad.tri_inverse(p_chol)
    delta = q_mu if p_mean is None else q_mu - p_mean
    v = ad.matmul(Linv, ad.transpose(delta))  # (..., M, D)
    maha = ad.sum(ad.square(v), axis=(-2, -1))

    if diag_q:
        prec_diag = ad.sum(ad.square(Linv), axis=-2)  # diag(K^{-1}), (..., M)
        prec_diag = ad.broadcast(ad.expand_dims(prec_diag, -2), q_sqrt.shape)
        trace = ad.sum(ad.square(q_sqrt) * prec_diag, axis=(-2, -1))
        logdet_q = 2.0 * ad.sum(ad.log(q_sqrt), axis=(-2, -1))
    else:
        Lx = ad.broadcast(ad.expand_dims(Linv, -3), q_sqrt.shape)
        trace = ad.sum(ad.square(ad.matmul(Lx, q_sqrt)), axis=(-3, -2, -1))
        logdet_q = ad.sum(ad.logdet_from_chol(q_sqrt), axis=-1)
    logdet_p = ad.logdet_from_chol(p_chol)
    return 0.5 * (trace + maha - float(D * M) + float(D) * logdet_p - logdet_q)


# ---------------------------------------------------------------------------
# likelihood helpers


@lru_cache(maxsize=16)
def _hermgauss(n: int):
    t, w = np.polynomial.hermite.hermgauss(n)
    return t, w / math.sqrt(math.pi)


def gauss_hermite_expect(log_lik: Callable, mean, var, n_points: int = DEFAULT_GH_POINTS):
    """``E[log_lik(f)]`` for ``f ~ N(mean, var)`` by Gauss–Hermite quadrature.

    Works elementwise over arrays/tensors of means and variances; returns a
    float when both are Python scalars.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    t, w = _hermgauss(n_points)
    scalar = not isinstance(mean, Tensor) and not isinstance(var, Tensor) and np.ndim(mean) == 0 and np.ndim(var) == 0
    mean, var = _t(mean), _t(var)
    if np.any(var.value < 0):
        raise ValueError("variance must be non-negative")
    shape = np.broadcast_shapes(mean.shape, var.shape) + (n_points,)
    m = ad.broadcast(ad.expand_dims(mean, -1), shape)
    s = ad.broadcast(ad.expand_dims(ad.sqrt(2.0 * var), -1), shape)
    f = m + s * t
    out = ad.sum(_t(log_lik(f)) * w, axis=-1)
    return float(out.value) if scalar else out


def probit(t):
    """Standard normal CDF via ``erf``."""
    return 0.5 * (1.0 + ad.erf(_t(t) * (1.0 / math.sqrt(2.0))))


def log_probit(t):
    return ad.log_ndtr(_t(t))


def gaussian_log_density(y, mean, var):
    y, mean, var = _t(y), _t(mean), _t(var)
    return -0.5 * math.log(2.0 * math.pi) - 0.5 * ad.log(var) - 0.5 * ad.square(y - mean) / var


def gaussian_expected_loglik(y, mean, var, obs_var):
    """Closed-form ``E_{N(f|mean,var)} ln N(y | f, obs_var)``."""
    y, mean, var, obs_var = _t(y), _t(mean), _t(var), _t(obs_var)
    return (-0.5 * math.log(2.0 * math.pi) - 0.5 * ad.log(obs_var)
            - 0.5 * (ad.square(y - mean) + var) / obs_var)


def bernoulli_expected_loglik(y, mean, var, n_points: int = DEFAULT_GH_POINTS):
    """``E ln Phi((2y-1) f)`` for labels ``y`` in {0, 1}."""
    sign = 2.0 * np.asarray(ad.value(y)) - 1.0
    return gauss_hermite_expect(lambda f: log_probit(f * np.broadcast_to(sign[..., None], f.shape)), mean, var, n_points)


def bernoulli_predictive(mean, var) -> np.ndarray:
    """``E Phi(f) = Phi(mean / sqrt(1 + var))`` under ``N(mean, var)`` (plain arrays)."""
    mean = np.asarray(mean, dtype=np.float64)
    var = np.maximum(np.asarray(var, dtype=np.float64), 0.0)
    return ndtr(mean / np.sqrt(1.0 + var))
