"""Deep GP built from stacked layers: forward rules, objectives, prediction.

Rules
-----
AR1    each sampled path feeds its own inference-function call.
AR2    one call per datapoint on the path-averaged mean; paths share U.
AR2P   AR2 with learnable quadrature points ``xi`` and weights ``omega``.
AR2PP  AR2P trained on the predictive (mixture) log-density.
DS     global inducing variables, sampled paths.
DSPP   global inducing variables, learnable quadrature, predictive objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adcore as ad
from . import gpmath as gm
from .adcore import Tensor
from .amortizer import count_params
from .layers import (LayerSpec, Likelihood, expected_loglik, init_layer, layer_forward, layer_view,
                     log_obs_var_init, log_predictive_density, prefix)

RULES = ("AR1", "AR2", "AR2P", "AR2PP", "DS", "DSPP")
AMORTIZED_RULES = ("AR1", "AR2", "AR2P", "AR2PP")
QUADRATURE_RULES = ("AR2P", "AR2PP", "DSPP")
PREDICTIVE_RULES = ("AR2PP", "DSPP")


@dataclass
class DgpModel:
    specs: list
    rule: str
    S: int
    likelihood: str = "gaussian"
    beta_reg: float = 1.0
    S_eval: int = 32
    n_gh: int = gm.DEFAULT_GH_POINTS
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule '{self.rule}'")
        if self.S < 1 or self.S_eval < 1:
            raise ValueError("S must be >= 1")
        if self.likelihood not in ("gaussian", "bernoulli"):
            raise ValueError(f"unknown likelihood '{self.likelihood}'")
        for a, b in zip(self.specs, self.specs[1:]):
            if a.d_out != b.d_in:
                raise ValueError("consecutive layer dimensions do not chain")

    @property
    def L(self) -> int:
        return len(self.specs)

    @property
    def amortized(self) -> bool:
        return self.rule in AMORTIZED_RULES

    @property
    def quadrature(self) -> bool:
        return self.rule in QUADRATURE_RULES

    def eval_paths(self) -> int:
        """Number of mixture components used at validation/test time."""
        if self.quadrature:
            return self.S
        return self.S_eval


@dataclass
class ModelView:
    layers: list
    lik: Likelihood
    xi: Tensor | None
    omega: Tensor | None


def view(model: DgpModel, p: dict | None = None) -> ModelView:
    p = model.params if p is None else p
    layers = [layer_view(p, spec, i + 1) for i, spec in enumerate(model.specs)]
    lik = Likelihood(model.likelihood, p.get("likelihood.log_obs_var"), model.n_gh)
    xi = omega = None
    if model.quadrature:
        xi = p["quad.xi"]
        omega = ad.softmax(p["quad.omega_logits"])
    return ModelView(layers, lik, xi, omega)


def build_model(rule: str, dims: list, M: list, S: int, *, likelihood: str = "gaussian",
                inference: str = "affine_mlp", seed: int = 0, X_init: np.ndarray | None = None,
                beta_reg: float = 1.0, S_eval: int = 32, mean: str | None = None,
                full_cov: bool | None = None, obs_var: float = 0.1) -> DgpModel:
    """Construct and initialise a model.

    ``dims`` lists D^0..D^L; ``M`` lists the inducing count per layer.
    Amortized rules default to zero mean functions; DS/DSPP use linear
    means on intermediate layers.  Full-covariance factors are the default
    only for one-layer models.
    """
    L = len(dims) - 1
    if L < 1 or len(M) != L:
        raise ValueError("need len(M) == len(dims) - 1 >= 1")
    amortized = rule in AMORTIZED_RULES
    if full_cov is None:
        full_cov = L == 1
    specs = []
    for l in range(L):
        if mean is not None:
            mfn = mean if l < L - 1 else "zero"
        else:
            mfn = "zero" if amortized or l == L - 1 else "linear"
        specs.append(LayerSpec(dims[l], dims[l + 1], M[l], "amortized" if amortized else "global",
                               inference, mfn, full_cov))
    model = DgpModel(specs, rule, S, likelihood, beta_reg, S_eval)
    rng = np.random.default_rng(seed)
    p = {}
    Z = None
    for l, spec in enumerate(specs):
        if not amortized:
            if l == 0:
                if X_init is not None and len(X_init) >= spec.M:
                    idx = rng.choice(len(X_init), size=spec.M, replace=False)
                    Z = np.array(X_init[np.sort(idx)], dtype=np.float64)
                else:
                    Z = rng.normal(size=(spec.M, spec.d_in))
            else:
                Z = Z @ gm.identity_padded(Z.shape[1], spec.d_in)
                if len(Z) != spec.M:
                    Z = Z[rng.choice(len(Z), size=spec.M, replace=len(Z) < spec.M)]
                    Z = Z + 1e-3 * rng.normal(size=Z.shape)
        p.update(init_layer(spec, l + 1, rng, Z, inner=l < L - 1))
    if model.quadrature:
        p["quad.xi"] = rng.normal(size=(L - 1, S))
        p["quad.omega_logits"] = np.zeros(S)
    if likelihood == "gaussian":
        p["likelihood.log_obs_var"] = log_obs_var_init(obs_var)
    model.params = p
    return model


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class ForwardPass:
    """Final-layer components plus the aggregate KL of one forward pass.

    ``mean``/``var`` are (B, P, D^L) with P the number of paths (1 when
    L == 1).  ``weights`` has length P.  ``kl`` is the sum over datapoints
    and layers for amortized rules (AR1 averages over its paths) and the
    sum of the per-layer global KLs for DS/DSPP.
    """

    mean: Tensor
    var: Tensor
    weights: Tensor
    kl: Tensor
    amortizer_inputs: list = field(default_factory=list)
    layer_means: list = field(default_factory=list)
    layer_vars: list = field(default_factory=list)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _propagate(mean, var, noise):
    """``m + noise * sqrt(K)`` broadcast to noise's path count."""
    B, P, D = mean.shape
    shape = (B, noise.shape[1], D)
    m = mean if P == shape[1] else ad.broadcast(mean, shape)
    v = var if P == shape[1] else ad.broadcast(var, shape)
    if not isinstance(noise, Tensor):
        noise = np.broadcast_to(noise, shape)
    elif noise.shape != shape:
        noise = ad.broadcast(noise, shape)
    return m + noise * ad.sqrt(v)


def _noise(l: int, B: int, S: int, D: int, rng, eps):
    # l is the 0-based index of the layer producing the propagated values
    if eps is not None:
        e = eps[l]
        if isinstance(e, Tensor):
            return ad.broadcast(ad.reshape(e, (1, S, 1)), (B, S, D)) if e.ndim == 1 else e
        e = np.asarray(e, dtype=np.float64)
        if e.ndim == 1:
            e = e.reshape(1, S, 1)
        return np.broadcast_to(e, (B, S, D))
    if rng is None:
        raise ValueError("a random generator is required for sampling rules")
    return rng.standard_normal((B, S, D))


def _combine(mean, omega):
    """Amortizer input from path means: plain or omega-weighted average."""
    B, P, D = mean.shape
    if P == 1:
        return ad.reshape(mean, (B, D))
    if omega is None:
        return ad.mean(mean, axis=1)
    w = ad.broadcast(ad.reshape(omega, (1, P, 1)), mean.shape)
    return ad.sum(mean * w, axis=1)


def _first_layer(x, mv: ModelView, fp: ForwardPass):
    out = layer_forward(ad.expand_dims(x, 1), x, mv.layers[0])
    fp.amortizer_inputs.append(x.value)
    fp.layer_means.append(out.marginal.mean)
    fp.layer_vars.append(out.marginal.var)
    return out


def forward(model: DgpModel, x, p: dict | None = None, S: int | None = None,
            rng: np.random.Generator | None = None, eps=None) -> ForwardPass:
    """Dispatch to the rule-specific forward pass.

    ``eps`` optionally supplies the per-layer standard-normal draws used to
    propagate between layers (entry ``l`` for the output of layer ``l+1``),
    each broadcastable to (B, S, D) or given as length-S vectors.
    """
    rule = model.rule
    S = model.S if S is None else S
    if S < 1:
        raise ValueError("S must be >= 1")
    if rule == "AR1":
        return forward_ar1(model, x, S, rng, p, eps)
    if rule == "AR2":
        return forward_ar2(model, x, S, rng, p, eps)
    if rule in ("AR2P", "AR2PP"):
        return forward_ar2p(model, x, p)
    if rule == "DS":
        return forward_ds(model, x, S, rng, p, eps)
    return forward_dspp(model, x, p)


def forward_ar1(model: DgpModel, x, S: int, rng=None, p=None, eps=None) -> ForwardPass:
    mv = view(model, p)
    x = _t(x)
    B = x.shape[0]
    fp = ForwardPass(None, None, None, None)
    out = _first_layer(x, mv, fp)
    mean, var, kl = out.marginal.mean, out.marginal.var, ad.sum(out.kl_per_point)
    for l in range(1, model.L):
        D = mean.shape[-1]
        F = _propagate(mean, var, _noise(l - 1, B, S, D, rng, eps))
        flat = ad.reshape(F, (B * S, D))
        fp.amortizer_inputs.append(flat.value)
        o = layer_forward(ad.expand_dims(flat, 1), flat, mv.layers[l])
        d = mv.layers[l].spec.d_out
        mean = ad.reshape(o.marginal.mean, (B, S, d))
        var = ad.reshape(o.marginal.var, (B, S, d))
        kl = kl + ad.sum(o.kl_per_point) * (1.0 / S)
        fp.layer_means.append(mean)
        fp.layer_vars.append(var)
    P = mean.shape[1]
    fp.mean, fp.var, fp.kl = mean, var, kl
    fp.weights = Tensor(np.full(P, 1.0 / P))
    return fp


def _forward_shared(model: DgpModel, x, S: int, rng, p, eps, omega_from_view: bool) -> ForwardPass:
    mv = view(model, p)
    x = _t(x)
    B = x.shape[0]
    omega = mv.omega if omega_from_view else None
    if omega_from_view and eps is None:
        eps = [mv.xi[l] for l in range(model.L - 1)]
        S = model.S
    fp = ForwardPass(None, None, None, None)
    out = _first_layer(x, mv, fp)
    mean, var, kl = out.marginal.mean, out.marginal.var, ad.sum(out.kl_per_point)
    for l in range(1, model.L):
        D = mean.shape[-1]
        a = _combine(mean, omega)
        F = _propagate(mean, var, _noise(l - 1, B, S, D, rng, eps))
        fp.amortizer_inputs.append(a.value)
        o = layer_forward(F, a, mv.layers[l])
        mean, var = o.marginal.mean, o.marginal.var
        kl = kl + ad.sum(o.kl_per_point)
        fp.layer_means.append(mean)
        fp.layer_vars.append(var)
    P = mean.shape[1]
    fp.mean, fp.var, fp.kl = mean, var, kl
    fp.weights = omega if (omega is not None and P == model.S) else Tensor(np.full(P, 1.0 / P))
    return fp


def forward_ar2(model: DgpModel, x, S: int, rng=None, p=None, eps=None) -> ForwardPass:
    return _forward_shared(model, x, S, rng, p, eps, omega_from_view=False)


def forward_ar2p(model: DgpModel, x, p=None) -> ForwardPass:
    if not model.quadrature:
        raise ValueError(f"rule {model.rule} has no quadrature parameters")
    return _forward_shared(model, x, model.S, None, p, None, omega_from_view=True)


def _forward_global(model: DgpModel, x, S: int, rng, p, eps, quadrature: bool) -> ForwardPass:
    mv = view(model, p)
    x = _t(x)
    B = x.shape[0]
    omega = mv.omega if quadrature else None
    if quadrature:
        eps = [mv.xi[l] for l in range(model.L - 1)]
        S = model.S
    fp = ForwardPass(None, None, None, None)
    out = _first_layer(x, mv, fp)
    mean, var, kl = out.marginal.mean, out.marginal.var, out.kl
    for l in range(1, model.L):
        D = mean.shape[-1]
        F = _propagate(mean, var, _noise(l - 1, B, S, D, rng, eps))
        o = layer_forward(F, None, mv.layers[l])
        mean, var = o.marginal.mean, o.marginal.var
        kl = kl + o.kl
        fp.layer_means.append(mean)
        fp.layer_vars.append(var)
    P = mean.shape[1]
    fp.mean, fp.var, fp.kl = mean, var, kl
    fp.weights = omega if (omega is not None and P == model.S) else Tensor(np.full(P, 1.0 / P))
    return fp


def forward_ds(model: DgpModel, x, S: int, rng=None, p=None, eps=None) -> ForwardPass:
    return _forward_global(model, x, S, rng, p, eps, quadrature=False)


def forward_dspp(model: DgpModel, x, p=None) -> ForwardPass:
    return _forward_global(model, x, model.S, None, p, None, quadrature=True)


# ---------------------------------------------------------------------------
# objectives


def _kl_term(model: DgpModel, fp: ForwardPass, B: int):
    # amortized: (1/N) per-datapoint weighting rescaled by N/B -> 1/B
    return fp.kl * (1.0 / B) if model.amortized else fp.kl


def _weighted(per_path, weights):
    B, P = per_path.shape
    return ad.sum(per_path * ad.broadcast(ad.reshape(weights, (1, P)), (B, P)), axis=1)


def _targets(y, B: int) -> np.ndarray:
    y = np.asarray(ad.value(y), dtype=np.float64)
    return y.reshape(B, -1)


def elbo(model: DgpModel, x, y, N_total: int, p: dict | None = None, rng=None, S: int | None = None,
         eps=None, fp: ForwardPass | None = None):
    """Negated minibatch ELBO (a loss to minimise)."""
    x = _t(x)
    B = x.shape[0]
    y = _targets(y, B)
    fp = fp or forward(model, x, p, S, rng, eps)
    mv_lik = view(model, p).lik
    ell = expected_loglik(y, fp.mean, fp.var, mv_lik)  # (B, P)
    fit = ad.sum(_weighted(ell, fp.weights)) * (N_total / B)
    return -(fit - _kl_term(model, fp, B))


def pp_objective(model: DgpModel, x, y, N_total: int, p: dict | None = None, fp: ForwardPass | None = None,
                 rng=None, S: int | None = None, eps=None):
    """Negated predictive objective: mixture log-density minus beta * KL."""
    if model.likelihood != "gaussian":
        raise ValueError("the predictive objective needs a gaussian likelihood")
    x = _t(x)
    B = x.shape[0]
    y = _targets(y, B)
    fp = fp or forward(model, x, p, S, rng, eps)
    lik = view(model, p).lik
    lpd = log_predictive_density(y, fp.mean, fp.var, lik)  # (B, P)
    P = lpd.shape[1]
    logw = ad.log(ad.broadcast(ad.reshape(fp.weights, (1, P)), (B, P)))
    per_point = ad.logsumexp(lpd + logw, axis=1)
    fit = ad.sum(per_point) * (N_total / B)
    return -(fit - model.beta_reg * _kl_term(model, fp, B))


def loss(model: DgpModel, x, y, N_total: int, p: dict | None = None, rng=None, S: int | None = None, eps=None):
    """The training objective for the model's rule (negated)."""
    if model.rule in PREDICTIVE_RULES:
        return pp_objective(model, x, y, N_total, p, rng=rng, S=S, eps=eps)
    return elbo(model, x, y, N_total, p, rng, S, eps)


# ---------------------------------------------------------------------------
# prediction


@dataclass
class MixturePredictive:
    """Per-point Gaussian mixture over f at the last layer.

    ``means``/``vars`` are (B, S, D); ``weights`` is (S,) and sums to 1.
    """

    means: np.ndarray
    vars: np.ndarray
    weights: np.ndarray
    obs_var: float | None = None

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def mean(self) -> np.ndarray:
        return np.einsum("bsd,s->bd", self.means, self.weights)

    def bernoulli_prob(self) -> np.ndarray:
        """``sum_s w_s E[Phi(f)]`` over the components; shape (B,)."""
        comp = gm.bernoulli_predictive(self.means[..., 0], self.vars[..., 0])
        return np.clip(comp @ self.weights, 0.0, 1.0)


def predict(model: DgpModel, x, S: int | None = None, rng: np.random.Generator | None = None,
            p: dict | None = None, batch_size: int = 1000) -> MixturePredictive:
    """Mixture predictive at ``x``, evaluated in chunks without a tape."""
    x = np.asarray(x, dtype=np.float64)
    if S is None:
        S = model.eval_paths()
    if not model.quadrature and model.L > 1 and rng is None:
        raise ValueError(f"rule {model.rule} samples between layers; pass rng")
    p = model.params if p is None else p
    means, variances, weights = [], [], None
    for start in range(0, len(x), batch_size):
        fp = forward(model, x[start:start + batch_size], p, S, rng)
        means.append(fp.mean.value)
        variances.append(fp.var.value)
        weights = fp.weights.value
    if weights is None:
        P = 1 if model.L == 1 else (model.S if model.quadrature else S)
        D = model.specs[-1].d_out
        means, variances = [np.zeros((0, P, D))], [np.zeros((0, P, D))]
        weights = np.full(P, 1.0 / P)
    obs = None
    if model.likelihood == "gaussian":
        obs = float(np.exp(p["likelihood.log_obs_var"]))
    return MixturePredictive(np.concatenate(means), np.concatenate(variances), np.asarray(weights), obs)


# ---------------------------------------------------------------------------
# complexity accounting


@dataclass
class LayerCost:
    layer: int
    gp_time: int
    amortizer_time: int
    time: int
    memory: int
    multiplier: int


def cost_report(model: DgpModel, B: int = 1, S: int | None = None) -> list:
    """Analytic per-layer operation and memory counts.

    Per layer: GP term ``M^3 D`` (time) or ``M^2 D`` (memory) plus the
    inference-function term ``M (D_in)^2 + |phi| + |psi|`` (zero in global
    mode).  Amortized layers are counted per datapoint (x B); AR1 repeats
    every layer after the first once per sampled path (x S).
    """
    S = model.S if S is None else S
    rows = []
    for l, spec in enumerate(model.specs):
        M, D, Din = spec.M, spec.d_out, spec.d_in
        if spec.mode == "amortized":
            phi, psi = count_params(model.params, prefix(l + 1))
            amort = M * Din * Din + phi + psi
            mult = B
        else:
            amort = 0
            mult = 1
        if model.rule == "AR1" and l >= 1:
            mult *= S
        gp_time = M ** 3 * D
        gp_mem = M ** 2 * D
        rows.append(LayerCost(l + 1, mult * gp_time, mult * amort, mult * (gp_time + amort),
                              mult * gp_mem + (B if spec.mode == "amortized" else 1) * amort, mult))
    return rows


def n_parameters(model: DgpModel) -> int:
    return int(sum(np.size(v) for v in model.params.values()))
