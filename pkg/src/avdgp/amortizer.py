"""Inference functions: inputs -> per-input inducing points and q(u) parameters.

The default inference function pairs a bank of ``M`` affine maps (one per
inducing point) with two small MLPs for the variational means and the
Cholesky factors.  A single joint MLP emitting everything at once is kept
for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import adcore as ad
from .adcore import Tensor

LEAKY_SLOPE = 0.2
BIAS_STD = 0.5
# softplus^{-1}(1): the factor head starts at exactly 1
SOFTPLUS_INV_ONE = math.log(math.e - 1.0)
# softplus underflows to 0 below about -745; the floor keeps factor
# diagonals strictly positive while its square is still a normal double
FACTOR_FLOOR = 1e-150


@dataclass
class AffineBank:
    W: Tensor  # (M, D, D)
    b: Tensor  # (M, D)


@dataclass
class Mlp:
    weights: list
    biases: list
    alpha: float = LEAKY_SLOPE


@dataclass
class Amortizer:
    """Bundle of one layer's inference-function parameters.

    Exactly one of (``affine``, ``mu_net``, ``sqrt_net``) or ``joint`` is set.
    """

    M: int
    d_in: int
    d_out: int
    full_cov: bool = False
    affine: AffineBank | None = None
    mu_net: Mlp | None = None
    sqrt_net: Mlp | None = None
    joint: Mlp | None = None


@dataclass
class AmortizerOutput:
    Z: Tensor  # (B, M, D_in)
    mu: Tensor  # (B, D_out, M)
    sqrt: Tensor  # (B, D_out, M) diagonal or (B, D_out, M, M) lower


def hidden_width(d_in: int, d_out: int) -> int:
    return max(1, min(d_in, d_out))


def n_offdiag(M: int) -> int:
    return M * (M - 1) // 2


def sqrt_head_width(M: int, d_out: int, full_cov: bool) -> int:
    return d_out * M + (d_out * n_offdiag(M) if full_cov else 0)


# ---------------------------------------------------------------------------
# forward maps


def affine_map(x, bank: AffineBank):
    """``Z[b, m] = W_m x_b + b_m`` for every input row; returns (B, M, D)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    M, D = bank.W.shape[0], bank.W.shape[1]
    if x.shape[-1] != D:
        raise ad.ShapeError(f"affine_map: input dim {x.shape[-1]} != {D}")
    # stack the W_m^T side by side so the whole bank is one matmul
    Wcat = ad.reshape(ad.transpose(bank.W, (2, 0, 1)), (D, M * D))
    Z = ad.reshape(ad.matmul(x, Wcat), x.shape[:-1] + (M, D))
    return Z + bank.b


def mlp_forward(x, net: Mlp):
    """affine -> leaky_relu -> ... -> affine (no activation on the output)."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = ad.matmul(h, W) + b
        if i < last:
            h = ad.leaky_relu(h, net.alpha)
    return h


def _offdiag_selector(M: int) -> np.ndarray:
    rows, cols = np.tril_indices(M, -1)
    E = np.zeros((len(rows), M * M))
    E[np.arange(len(rows)), rows * M + cols] = 1.0
    return E


def positive(raw):
    """softplus with a tiny floor, for Cholesky-factor diagonals."""
    return ad.clamp_min(ad.softplus(raw), FACTOR_FLOOR)


def _build_sqrt(raw, M: int, d_out: int, full_cov: bool):
    B = raw.shape[0]
    k = d_out * M
    diag = positive(ad.reshape(raw[:, :k], (B, d_out, M)))
    if not full_cov:
        return diag
    T = n_offdiag(M)
    off = ad.reshape(raw[:, k:k + d_out * T], (B, d_out, T))
    lower = ad.reshape(ad.matmul(off, _offdiag_selector(M)), (B, d_out, M, M))
    return lower + ad.diag_embed(diag)


def amortize_layer(inputs, amortizer: Amortizer) -> AmortizerOutput:
    """Map a batch of (B, D_in) inputs to per-input Z, mean and factor."""
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    M, din, dout = amortizer.M, amortizer.d_in, amortizer.d_out
    B = x.shape[0]
    if amortizer.joint is not None:
        out = mlp_forward(x, amortizer.joint)
        nz, nm = M * din, M * dout
        Z = ad.reshape(out[:, :nz], (B, M, din))
        mu = ad.reshape(out[:, nz:nz + nm], (B, dout, M))
        sq = _build_sqrt(out[:, nz + nm:], M, dout, amortizer.full_cov)
        return AmortizerOutput(Z, mu, sq)
    Z = affine_map(x, amortizer.affine)
    mu = ad.reshape(mlp_forward(x, amortizer.mu_net), (B, dout, M))
    sq = _build_sqrt(mlp_forward(x, amortizer.sqrt_net), M, dout, amortizer.full_cov)
    return AmortizerOutput(Z, mu, sq)


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_mlp(rng: np.random.Generator, d_in: int, d_out: int, final_bias=0.0,
             final_zero: bool = True, prefix: str = "") -> dict:
    """Two-hidden-layer MLP of width ``min(d_in, d_out)``.

    Hidden layers get fan-in scaled uniform noise; the output layer has
    zero weights (when ``final_zero``) so the output equals the bias.
    """
    h = hidden_width(d_in, d_out)
    dims = [d_in, h, h, d_out]
    p = {}
    for i in range(3):
        fi, fo = dims[i], dims[i + 1]
        if i == 2 and final_zero:
            p[f"{prefix}W{i}"] = np.zeros((fi, fo))
            p[f"{prefix}b{i}"] = np.broadcast_to(np.asarray(final_bias, dtype=np.float64), (fo,)).copy()
        else:
            p[f"{prefix}W{i}"] = _uniform(rng, fi, (fi, fo))
            p[f"{prefix}b{i}"] = _uniform(rng, fi, (fo,))
    return p


def init_amortizer(d_in: int, d_out: int, M: int, rng: np.random.Generator | int,
                   kind: str = "affine_mlp", full_cov: bool = False, prefix: str = "") -> dict:
    """Initial parameter arrays for one layer's inference function.

    ``affine_mlp``: identity ``W_m``, ``b_m ~ N(0, 0.5^2)``, mean head at 0
    and factor head at 1.  ``joint_mlp``: the same head initialisation for
    the mean and factor slices; the inducing-point slice starts from a
    random linear read-out plus the same noisy biases.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    sq_out = sqrt_head_width(M, d_out, full_cov)
    sq_bias = np.zeros(sq_out)
    sq_bias[: d_out * M] = SOFTPLUS_INV_ONE
    p = {}
    if kind == "affine_mlp":
        p[f"{prefix}affine.W"] = np.broadcast_to(np.eye(d_in), (M, d_in, d_in)).copy()
        p[f"{prefix}affine.b"] = rng.normal(0.0, BIAS_STD, size=(M, d_in))
        p.update(init_mlp(rng, d_in, d_out * M, 0.0, prefix=f"{prefix}mu_net."))
        p.update(init_mlp(rng, d_in, sq_out, sq_bias, prefix=f"{prefix}sqrt_net."))
    elif kind == "joint_mlp":
        nz = M * d_in
        out = nz + d_out * M + sq_out
        bias = np.concatenate([rng.normal(0.0, BIAS_STD, size=nz), np.zeros(d_out * M), sq_bias])
        net = init_mlp(rng, d_in, out, bias, prefix=f"{prefix}joint_net.")
        W = net[f"{prefix}joint_net.W2"]
        W[:, :nz] = _uniform(rng, W.shape[0], (W.shape[0], nz))
        p.update(net)
    else:
        raise ValueError(f"unknown inference function '{kind}'")
    return p


def _mlp_view(p: dict, prefix: str) -> Mlp:
    return Mlp([p[f"{prefix}W{i}"] for i in range(3)], [p[f"{prefix}b{i}"] for i in range(3)])


def amortizer_view(p: dict, prefix: str, M: int, d_in: int, d_out: int,
                   kind: str = "affine_mlp", full_cov: bool = False) -> Amortizer:
    """Assemble an :class:`Amortizer` from a flat name -> tensor mapping."""
    am = Amortizer(M, d_in, d_out, full_cov)
    if kind == "affine_mlp":
        am.affine = AffineBank(p[f"{prefix}affine.W"], p[f"{prefix}affine.b"])
        am.mu_net = _mlp_view(p, f"{prefix}mu_net.")
        am.sqrt_net = _mlp_view(p, f"{prefix}sqrt_net.")
    else:
        am.joint = _mlp_view(p, f"{prefix}joint_net.")
    return am


def count_params(p: dict, prefix: str) -> tuple[int, int]:
    """(|phi|, |psi|): mean-head and factor-head parameter counts."""
    mu = sum(np.size(v) for k, v in p.items() if k.startswith(f"{prefix}mu_net."))
    sq = sum(np.size(v) for k, v in p.items() if k.startswith(f"{prefix}sqrt_net."))
    joint = sum(np.size(v) for k, v in p.items() if k.startswith(f"{prefix}joint_net."))
    return mu + joint, sq
