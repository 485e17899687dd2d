"""Adam, the minibatch training loop, evaluation, and checkpoint files."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import adcore as ad
from . import deepmodel as dm
from .config import ModelConfig
from .data import Dataset
from .metrics import ScoreReport, score_binary, score_regression

MAGIC = b"AVDGPCK1"


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter '{name}'")
        self.name = name


class CorruptCheckpoint(ValueError):
    pass


class ConfigMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, clip_norm: float | None = None) -> dict:
    """One bias-corrected Adam update; returns the new parameter dict.

    All gradients are checked before anything is modified, so a non-finite
    gradient aborts the step with no side effects.
    """
    for name in sorted(grads):
        if np.shape(grads[name]) != np.shape(params[name]):
            raise ad.ShapeError(f"gradient for '{name}' has shape {np.shape(grads[name])}")
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradient(name)
    scale = 1.0
    if clip_norm is not None:
        total = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
        if total > clip_norm:
            scale = clip_norm / total
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = dict(params)
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64) * scale
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ---------------------------------------------------------------------------
# model construction and evaluation


def model_from_config(cfg: ModelConfig, X_train: np.ndarray) -> dm.DgpModel:
    inference = "affine_mlp" if cfg.inference_fn == "global" else cfg.inference_fn
    return dm.build_model(cfg.rule, cfg.layer_dims(X_train.shape[1]), list(cfg.M), cfg.S,
                          likelihood=cfg.likelihood, inference=inference, seed=cfg.seed, X_init=X_train,
                          beta_reg=cfg.beta_reg, S_eval=cfg.S_eval, mean=cfg.mean_fn, full_cov=cfg.full_cov)


def eval_rng(seed: int) -> np.random.Generator:
    """Generator used for every evaluation so scores are reproducible."""
    return np.random.default_rng([seed, 3])


def evaluate(model: dm.DgpModel, ds: Dataset, seed: int = 0, params: dict | None = None) -> ScoreReport:
    mix = dm.predict(model, ds.X, rng=eval_rng(seed), p=params)
    if model.likelihood == "bernoulli":
        return score_binary(ds.y, mix)
    return score_regression(ds.y, mix)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: dm.DgpModel
    log: list
    best_params: dict
    best_epoch: int
    adam: AdamState


def loss_and_grads(model: dm.DgpModel, params: dict, xb, yb, N: int, rng) -> tuple:
    tape = ad.Tape()
    p = {k: tape.watch(v) for k, v in params.items()}
    loss = dm.loss(model, xb, yb, N, p, rng=rng)
    g = ad.backward(tape, loss)
    return float(loss.value), {k: g[t] for k, t in p.items()}


def train(model: dm.DgpModel, train_ds: Dataset, val_ds: Dataset | None, cfg: ModelConfig,
          on_epoch: Callable | None = None) -> TrainResult:
    """Adam on minibatches for ``cfg.epochs`` epochs.

    Shuffling and Monte Carlo noise come from generators seeded with
    ``cfg.seed``, so a run is bit-reproducible on one platform.
    """
    if model.rule in dm.PREDICTIVE_RULES and model.likelihood != "gaussian":
        raise ValueError("the predictive objective needs a gaussian likelihood")
    N = len(train_ds)
    X, y = train_ds.X, train_ds.y
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    noise_rng = np.random.default_rng([cfg.seed, 2])
    state = AdamState(lr=cfg.lr)
    params = dict(model.params)
    log = []
    best_nll, best_epoch, best_params = math.inf, 0, dict(params)
    val = val_ds
    if val is not None and cfg.val_max is not None and len(val) > cfg.val_max:
        val = val.subset(np.arange(cfg.val_max))
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(N)
        losses = []
        for start in range(0, N, cfg.batch):
            idx = perm[start:start + cfg.batch]
            value, grads = loss_and_grads(model, params, X[idx], y[idx], N, noise_rng)
            params = adam_step(params, grads, state, cfg.clip_norm)
            losses.append(value)
        model.params = params
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val is not None and len(val) and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            rep = evaluate(model, val, cfg.seed)
            row.update({f"val_{k}": v for k, v in rep.to_dict().items() if k != "n_test"})
            if rep.nll < best_nll:
                best_nll, best_epoch, best_params = rep.nll, epoch, dict(params)
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
    model.params = params
    return TrainResult(model, log, best_params, best_epoch, state)


def write_log_csv(path, log: list) -> None:
    keys = []
    for row in log:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for row in log:
            fh.write(",".join("" if row.get(k) is None else repr(row[k]) for k in keys) + "\n")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict, config_hash: str, epoch: int, extra: dict | None = None) -> None:
    """Write magic, u32 header length, JSON header, little-endian f64 payload."""
    manifest, offset, chunks = [], 0, []
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
        chunks.append(arr.tobytes(order="C"))
    header = {"config_hash": config_hash, "epoch": int(epoch), "manifest": manifest, "n_values": offset}
    if extra:
        header.update(extra)
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path, expected_hash: str | None = None) -> tuple:
    """Read a checkpoint; returns ``(params, header)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise CorruptCheckpoint(f"{path}: header truncated")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptCheckpoint(f"{path}: unreadable header") from None
    payload = raw[12 + hlen:]
    n = header.get("n_values", -1)
    if len(payload) != 8 * n:
        raise CorruptCheckpoint(f"{path}: payload has {len(payload)} bytes, manifest needs {8 * n}")
    values = np.frombuffer(payload, dtype="<f8")
    params, cursor = {}, 0
    for item in header["manifest"]:
        if item["offset"] != cursor or item["count"] != int(np.prod(item["shape"], dtype=np.int64)):
            raise CorruptCheckpoint(f"{path}: manifest entry '{item['name']}' is inconsistent")
        params[item["name"]] = values[cursor:cursor + item["count"]].astype(np.float64).reshape(item["shape"])
        cursor += item["count"]
    if cursor != n:
        raise CorruptCheckpoint(f"{path}: manifest does not cover the payload")
    if expected_hash is not None and header.get("config_hash") != expected_hash:
        raise ConfigMismatch(f"{path}: checkpoint was written for config {header.get('config_hash')[:12]}..., "
                             f"not {expected_hash[:12]}...")
    return params, header
