"""Experiment configuration (JSON) with strict validation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .deepmodel import RULES


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    task: str = "regression"  # regression | binary
    dataset: str = "toy"  # CSV path, or "toy" for the generated letters
    label_column: int = -1
    header: bool = False
    rule: str = "AR2P"
    L: int = 3
    dims: list = field(default_factory=lambda: [16, 4])  # D^1 .. D^{L-1}
    M: list = field(default_factory=lambda: [8, 4, 4])
    S: int = 32
    S_eval: int = 32
    lr: float = 0.005
    batch: int = 100
    epochs: int = 100
    seed: int = 0
    split_seed: int | None = None
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])  # train, test, val
    beta_reg: float = 1.0
    likelihood: str = "gaussian"  # gaussian | bernoulli
    inference_fn: str = "affine_mlp"  # affine_mlp | joint_mlp | global
    mean_fn: str | None = None  # zero | linear; None picks the rule default
    full_cov: bool | None = None
    toy_n: int = 80000
    val_every: int = 1
    val_max: int | None = None
    clip_norm: float | None = None

    def __post_init__(self):
        self.validate()

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.task in ("regression", "binary"), f"task must be regression or binary, got {self.task!r}")
        need(self.rule in RULES, f"rule must be one of {RULES}, got {self.rule!r}")
        need(isinstance(self.L, int) and self.L >= 1, "L must be a positive integer")
        need(len(self.dims) == self.L - 1, f"dims needs L-1 = {self.L - 1} entries, got {len(self.dims)}")
        need(all(isinstance(d, int) and d >= 1 for d in self.dims), "dims must be positive integers")
        need(len(self.M) == self.L, f"M needs L = {self.L} entries, got {len(self.M)}")
        need(all(isinstance(m, int) and m >= 1 for m in self.M), "M must be positive integers")
        need(self.S >= 1 and self.S_eval >= 1, "S and S_eval must be >= 1")
        need(self.lr > 0, "lr must be positive")
        need(self.batch >= 1 and self.epochs >= 0, "batch must be >= 1 and epochs >= 0")
        need(len(self.split) == 3 and abs(sum(self.split) - 1) < 1e-9 and min(self.split) >= 0,
             "split must be three non-negative fractions summing to 1")
        need(self.beta_reg > 0, "beta_reg must be positive")
        need(self.likelihood in ("gaussian", "bernoulli"), "likelihood must be gaussian or bernoulli")
        need(self.inference_fn in ("affine_mlp", "joint_mlp", "global"),
             "inference_fn must be affine_mlp, joint_mlp or global")
        need(self.mean_fn in (None, "zero", "linear"), "mean_fn must be zero or linear")
        amortized = self.rule not in ("DS", "DSPP")
        need(amortized == (self.inference_fn != "global"),
             f"rule {self.rule} is incompatible with inference_fn {self.inference_fn!r}")
        need(not (self.rule in ("AR2PP", "DSPP") and self.likelihood != "gaussian"),
             f"rule {self.rule} trains on the predictive density and needs a gaussian likelihood")
        need((self.task == "binary") == (self.likelihood == "bernoulli"),
             "binary tasks need the bernoulli likelihood and regression the gaussian one")
        need(self.val_every >= 1, "val_every must be >= 1")
        need(self.toy_n >= 10, "toy_n must be >= 10")

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "ModelConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d)

    # -- helpers -----------------------------------------------------------

    def layer_dims(self, d_in: int) -> list:
        out = 1
        return [d_in, *self.dims, out]

    def eval_S(self) -> int:
        return self.S if self.rule in ("AR2P", "AR2PP", "DSPP") else self.S_eval
