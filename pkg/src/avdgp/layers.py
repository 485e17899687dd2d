"""A single sparse-GP layer in amortized (per-input) or global mode."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import adcore as ad
from . import gpmath as gm
from .adcore import CholeskyError, Tensor
from .amortizer import SOFTPLUS_INV_ONE, Amortizer, amortize_layer, amortizer_view, init_amortizer, positive


@dataclass(frozen=True)
class LayerSpec:
    """Static description of a layer (no parameter values)."""

    d_in: int
    d_out: int
    M: int
    mode: str = "amortized"  # amortized | global
    inference: str = "affine_mlp"  # affine_mlp | joint_mlp (amortized only)
    mean: str = "zero"  # zero | linear
    full_cov: bool = False

    def __post_init__(self):
        if self.mode not in ("amortized", "global"):
            raise ValueError(f"unknown layer mode '{self.mode}'")
        if self.inference not in ("affine_mlp", "joint_mlp"):
            raise ValueError(f"unknown inference function '{self.inference}'")
        if self.mean not in ("zero", "linear"):
            raise ValueError(f"unknown mean function '{self.mean}'")
        if min(self.d_in, self.d_out, self.M) < 1:
            raise ValueError("layer dimensions and M must be positive")


@dataclass
class LayerParams:
    spec: LayerSpec
    index: int
    kernel: gm.KernelParams
    mean: gm.MeanFn
    amortizer: Amortizer | None = None
    Z: Tensor | None = None
    q_mu: Tensor | None = None
    q_sqrt: Tensor | None = None  # already constrained (positive diagonal)


@dataclass
class LayerOutput:
    marginal: gm.GaussianMarginal
    kl: Tensor
    kl_per_point: Tensor | None = None
    Z_used: Tensor | None = None


@dataclass
class Likelihood:
    kind: str = "gaussian"  # gaussian | bernoulli
    log_obs_var: Tensor | float | None = None
    n_gh: int = gm.DEFAULT_GH_POINTS

    def __post_init__(self):
        if self.kind not in ("gaussian", "bernoulli"):
            raise ValueError(f"unknown likelihood '{self.kind}'")

    @property
    def obs_var(self):
        return ad.exp(self.log_obs_var if isinstance(self.log_obs_var, Tensor) else Tensor(self.log_obs_var))


def prefix(index: int) -> str:
    return f"layer{index}."


# ---------------------------------------------------------------------------
# parameters


def init_layer(spec: LayerSpec, index: int, rng: np.random.Generator, Z_init: np.ndarray | None = None,
               inner: bool = False) -> dict:
    """Initial parameter arrays for layer ``index`` (1-based)."""
    pre = prefix(index)
    p = {f"{pre}kernel.log_lengthscale": np.array(0.0), f"{pre}kernel.log_variance": np.array(0.0)}
    W = gm.identity_padded(spec.d_in, spec.d_out)
    if spec.mean == "linear":
        p[f"{pre}mean.W"] = W.copy()
    if spec.mode == "amortized":
        p.update(init_amortizer(spec.d_in, spec.d_out, spec.M, rng, spec.inference, spec.full_cov, pre))
        return p
    if Z_init is None:
        Z_init = rng.normal(size=(spec.M, spec.d_in))
    if Z_init.shape != (spec.M, spec.d_in):
        raise ValueError(f"Z_init has shape {Z_init.shape}, expected {(spec.M, spec.d_in)}")
    p[f"{pre}Z"] = np.array(Z_init, dtype=np.float64)
    # start q(u) at the prior mean so the layer initially passes m(F) through
    mu_u = Z_init @ W if spec.mean == "linear" else np.zeros((spec.M, spec.d_out))
    p[f"{pre}q_mu"] = mu_u.T.copy()
    # intermediate layers start nearly deterministic
    scale = 1e-5 if inner else 1.0
    raw_diag = np.log(np.expm1(scale)) if scale != 1.0 else SOFTPLUS_INV_ONE
    if spec.full_cov:
        p[f"{pre}q_sqrt"] = np.broadcast_to(np.eye(spec.M) * raw_diag, (spec.d_out, spec.M, spec.M)).copy()
    else:
        p[f"{pre}q_sqrt"] = np.full((spec.d_out, spec.M), raw_diag)
    return p


def constrain_sqrt(raw, full_cov: bool):
    """Positive-diagonal factor from an unconstrained array."""
    if not full_cov:
        return positive(raw)
    M = raw.shape[-1]
    strict = np.tril(np.ones((M, M)), -1)
    return raw * strict + ad.diag_embed(positive(ad.diag_extract(raw)))


def layer_view(p: dict, spec: LayerSpec, index: int) -> LayerParams:
    pre = prefix(index)
    kern = gm.KernelParams(p[f"{pre}kernel.log_lengthscale"], p[f"{pre}kernel.log_variance"])
    mean = gm.MeanFn(spec.mean, p.get(f"{pre}mean.W"), spec.d_out)
    lp = LayerParams(spec, index, kern, mean)
    if spec.mode == "amortized":
        lp.amortizer = amortizer_view(p, pre, spec.M, spec.d_in, spec.d_out, spec.inference, spec.full_cov)
    else:
        lp.Z = p[f"{pre}Z"]
        lp.q_mu = p[f"{pre}q_mu"]
        lp.q_sqrt = constrain_sqrt(p[f"{pre}q_sqrt"], spec.full_cov)
    return lp


# ---------------------------------------------------------------------------
# forward


def layer_forward(inputs, amortizer_inputs, layer: LayerParams) -> LayerOutput:
    """Marginal q(f) at ``inputs`` and the layer's KL contribution.

    ``inputs`` is (B, D_in) or (B, P, D_in): P feature paths per datapoint
    that share the datapoint's inducing variables.  ``amortizer_inputs``
    (B, D_in) feeds the inference function and is ignored in global mode.
    Marginal mean/var come back as (B, D_out) or (B, P, D_out).
    """
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.expand_dims(x, 1)
    B, P, D = x.shape
    spec = layer.spec
    if D != spec.d_in:
        raise ad.ShapeError(f"layer {layer.index}: input dim {D} != {spec.d_in}")
    context = f"layer {layer.index}"
    if spec.mode == "amortized":
        out = _amortized(x, amortizer_inputs, layer, context)
    else:
        out = _global(x, layer, context)
    if squeeze:
        m = out.marginal
        out.marginal = gm.GaussianMarginal(ad.reshape(m.mean, (B, spec.d_out)), ad.reshape(m.var, (B, spec.d_out)))
    return out


def _amortized(x, amortizer_inputs, layer: LayerParams, context: str) -> LayerOutput:
    spec = layer.spec
    a = amortizer_inputs if isinstance(amortizer_inputs, Tensor) else Tensor(amortizer_inputs)
    if a.shape != (x.shape[0], spec.d_in):
        raise ad.ShapeError(f"{context}: amortizer inputs {a.shape} do not match inputs {x.shape}")
    q = amortize_layer(a, layer.amortizer)
    Kuu = gm.matern52(q.Z, q.Z, layer.kernel)
    try:
        chol = gm.jittered_cholesky(Kuu, context)
    except CholeskyError as e:
        raise CholeskyError(e.pivot, e.batch_index, f"{context}, datapoint {e.batch_index}") from None
    Linv = ad.tri_inverse(chol)
    Kfu = gm.matern52(x, q.Z, layer.kernel)
    kdiag = gm.matern52_diag(x, layer.kernel)
    mean_f = layer.mean(x) if spec.mean == "linear" else None
    mean_u = layer.mean(q.Z) if spec.mean == "linear" else None
    diag_q = not spec.full_cov
    marg = gm.conditional(mean_f, kdiag, Kfu, None, q.mu, q.sqrt, mean_u, chol_inv=Linv, diag_q=diag_q)
    marg = gm.GaussianMarginal(marg.mean, ad.clamp_min(marg.var, 0.0))
    p_mean = None if mean_u is None else ad.transpose(mean_u)
    kl = gm.gauss_kl(q.mu, q.sqrt, p_mean, chol, p_chol_inv=Linv, diag_q=diag_q)
    return LayerOutput(marg, ad.sum(kl), kl, q.Z)


def _global(x, layer: LayerParams, context: str) -> LayerOutput:
    spec = layer.spec
    B, P, D = x.shape
    flat = ad.reshape(x, (B * P, D))
    Z = layer.Z if isinstance(layer.Z, Tensor) else Tensor(layer.Z)
    Kuu = gm.matern52(Z, Z, layer.kernel)
    chol = gm.jittered_cholesky(Kuu, context)
    Linv = ad.tri_inverse(chol)
    Kfu = gm.matern52(flat, Z, layer.kernel)
    kdiag = gm.matern52_diag(flat, layer.kernel)
    mean_f = layer.mean(flat) if spec.mean == "linear" else None
    mean_u = layer.mean(Z) if spec.mean == "linear" else None
    diag_q = not spec.full_cov
    marg = gm.conditional(mean_f, kdiag, Kfu, None, layer.q_mu, layer.q_sqrt, mean_u, chol_inv=Linv, diag_q=diag_q)
    mean = ad.reshape(marg.mean, (B, P, spec.d_out))
    var = ad.reshape(ad.clamp_min(marg.var, 0.0), (B, P, spec.d_out))
    p_mean = None if mean_u is None else ad.transpose(mean_u)
    kl = gm.gauss_kl(layer.q_mu, layer.q_sqrt, p_mean, chol, p_chol_inv=Linv, diag_q=diag_q)
    return LayerOutput(gm.GaussianMarginal(mean, var), kl, None, Z)


# ---------------------------------------------------------------------------
# likelihood terms


def expected_loglik(y, mean, var, lik: Likelihood):
    """``E ln p(y | f)`` per datapoint and path.

    ``y`` is (B, D); ``mean``/``var`` are (B, P, D); result is (B, P)
    (summed over output dimensions).
    """
    y = np.asarray(ad.value(y), dtype=np.float64)
    yb = y[:, None, :]
    if lik.kind == "gaussian":
        ell = gm.gaussian_expected_loglik(np.broadcast_to(yb, mean.shape), mean, var, lik.obs_var)
    else:
        if mean.shape[-1] != 1:
            raise ad.ShapeError("bernoulli likelihood needs a single output dimension")
        ell = gm.bernoulli_expected_loglik(np.broadcast_to(yb, mean.shape), mean, var, lik.n_gh)
    return ad.sum(ell, axis=-1)


def log_predictive_density(y, mean, var, lik: Likelihood):
    """``ln N(y | m, v + obs_var)`` per datapoint and path, summed over D."""
    y = np.asarray(ad.value(y), dtype=np.float64)
    yb = np.broadcast_to(y[:, None, :], mean.shape)
    total = var + ad.broadcast(lik.obs_var, var.shape)
    return ad.sum(gm.gaussian_log_density(yb, mean, total), axis=-1)


def shallow_elbo(X, y, layer: LayerParams, lik: Likelihood, N_total: int):
    """One-layer ELBO on a minibatch (a scalar tensor to maximise).

    Data fit is scaled by ``N_total / B``.  The KL is a single global term
    in global mode and the per-datapoint average (weight 1/B overall) in
    amortized mode.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    y = np.asarray(ad.value(y), dtype=np.float64).reshape(X.shape[0], -1)
    B = X.shape[0]
    out = layer_forward(ad.expand_dims(X, 1), X, layer)
    ell = expected_loglik(y, out.marginal.mean, out.marginal.var, lik)
    fit = (N_total / B) * ad.sum(ell)
    if layer.spec.mode == "global":
        return fit - out.kl
    return fit - out.kl * (1.0 / B)


def log_obs_var_init(obs_var: float = 0.1) -> np.ndarray:
    return np.array(math.log(obs_var))
