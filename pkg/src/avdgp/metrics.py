"""Scores for Gaussian-mixture predictives: NLL, RMSE, CRPS, error rate."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp, ndtr

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class ScoreReport:
    nll: float
    rmse: float
    crps: float
    n_test: int
    error_rate: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def mixture_nll(y, weights, means, variances, sigma_obs2: float = 0.0):
    """``-ln sum_s w_s N(y | m_s, v_s + sigma_obs2)``.

    ``means``/``variances`` carry the components on their last axis and
    broadcast against ``y[..., None]``; a scalar ``y`` gives a float.
    """
    w = np.asarray(weights, dtype=np.float64)
    m = np.asarray(means, dtype=np.float64)
    v = np.asarray(variances, dtype=np.float64) + sigma_obs2
    y = np.asarray(y, dtype=np.float64)
    logp = -HALF_LOG_2PI - 0.5 * np.log(v) - 0.5 * (y[..., None] - m) ** 2 / v
    with np.errstate(divide="ignore"):
        out = -logsumexp(logp + np.log(w), axis=-1)
    return float(out) if out.ndim == 0 else out


def _A(mu, var):
    # E|X| for X ~ N(mu, var); A(mu, 0) = |mu|
    sd = np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = mu / sd
        val = 2.0 * sd * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi) + mu * (2.0 * ndtr(z) - 1.0)
    return np.where(sd > 0, val, np.abs(mu))


def crps_mixture(x, weights, means, sigmas):
    """Closed-form CRPS of a Gaussian mixture at observation ``x``.

    Components live on the last axis of ``means``/``sigmas``.
    """
    w = np.asarray(weights, dtype=np.float64)
    m = np.asarray(means, dtype=np.float64)
    s2 = np.asarray(sigmas, dtype=np.float64) ** 2
    x = np.asarray(x, dtype=np.float64)
    first = np.sum(w * _A(x[..., None] - m, s2), axis=-1)
    dm = m[..., :, None] - m[..., None, :]
    ds = s2[..., :, None] + s2[..., None, :]
    second = 0.5 * np.einsum("i,j,...ij->...", w, w, _A(dm, ds))
    out = np.maximum(first - second, 0.0)
    return float(out) if out.ndim == 0 else out


def rmse(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def error_rate(y, p_hat) -> float:
    """Misclassification rate; ``p == 0.5`` counts as a class-1 prediction."""
    y = np.asarray(y).ravel()
    p = np.asarray(p_hat, dtype=np.float64).ravel()
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {p.shape}")
    pred = (p >= 0.5).astype(int)
    return float(np.mean(pred != y.astype(int)))


def score_regression(y, mixture) -> ScoreReport:
    """Scores for a single-output regression mixture (standardized scale).

    NLL and CRPS are for the targets, so the observation variance is added
    to every component.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    means = mixture.means[..., 0]
    total = mixture.vars[..., 0] + (mixture.obs_var or 0.0)
    nll = mixture_nll(y, mixture.weights, means, total)
    crps = crps_mixture(y, mixture.weights, means, np.sqrt(total))
    return ScoreReport(float(np.mean(nll)), rmse(y, mixture.mean()[:, 0]), float(np.mean(crps)), len(y))


def score_binary(y, mixture) -> ScoreReport:
    """Scores for a probit classifier.

    NLL is the log loss of the mixture probability; ``rmse`` and ``crps``
    are the root Brier score and the Brier score (the CRPS of a binary
    outcome).
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    p = mixture.bernoulli_prob()
    eps = 1e-300
    nll = -np.mean(y * np.log(np.maximum(p, eps)) + (1 - y) * np.log(np.maximum(1 - p, eps)))
    brier = float(np.mean((p - y) ** 2))
    return ScoreReport(float(nll), math.sqrt(brier), brier, len(y), error_rate(y, p))
