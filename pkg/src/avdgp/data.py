"""Datasets: CSV ingestion, standardization, splitting, toy letters, prior draws."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import gpmath as gm

MASK_RESOURCE = "dgp_mask.pbm"


class DataError(ValueError):
    pass


@dataclass
class Standardizer:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray | None = None) -> "Standardizer":
        xm = X.mean(axis=0)
        xs = X.std(axis=0)
        xs = np.where(xs > 0, xs, 1.0)
        if y is None:
            return cls(xm, xs)
        ys = float(y.std())
        return cls(xm, xs, float(y.mean()), ys if ys > 0 else 1.0)

    def transform_x(self, X):
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std

    def inverse_x(self, Z):
        return np.asarray(Z) * self.x_std + self.x_mean

    def transform_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def inverse_y(self, z):
        return np.asarray(z) * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["x_mean"], dtype=np.float64), np.array(d["x_std"], dtype=np.float64),
                   float(d["y_mean"]), float(d["y_std"]))


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    task: str = "regression"  # regression | binary
    standardizer: Standardizer | None = None

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return replace(self, X=self.X[idx], y=self.y[idx])

    def standardized(self, st: Standardizer) -> "Dataset":
        y = st.transform_y(self.y) if self.task == "regression" else self.y
        return Dataset(st.transform_x(self.X), y, self.task, st)


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    fractions: tuple = (0.8, 0.1, 0.1)  # train, test, val

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise DataError("fractions must be three non-negative numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DataError("split fractions must sum to 1")


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, label_column: int = -1, task: str = "regression", header: bool = False) -> Dataset:
    """Read a numeric CSV; ``label_column`` indexes the target column."""
    if task not in ("regression", "binary"):
        raise DataError(f"unknown task '{task}'")
    rows, lines = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for r, row in enumerate(reader, start=1):
            if header and r == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
                lines.append(r)
            except ValueError:
                bad = next(i for i, c in enumerate(row) if not _is_float(c))
                raise DataError(f"{path}: row {r}, column {bad + 1}: cannot parse {row[bad]!r}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(rows[0])
    for r, row in zip(lines, rows):
        if len(row) != width:
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected {width}")
    if width < 2:
        raise DataError(f"{path}: need at least one feature and a label column")
    data = np.array(rows, dtype=np.float64)
    bad = np.argwhere(~np.isfinite(data))
    if len(bad):
        r, c = bad[0]
        raise DataError(f"{path}: row {lines[r]}, column {c + 1}: non-finite value")
    col = label_column % width
    y = data[:, col]
    X = np.delete(data, col, axis=1)
    if task == "binary" and not np.all((y == 0) | (y == 1)):
        raise DataError(f"{path}: binary labels must be 0 or 1")
    return Dataset(X, y, task)


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def save_csv(path, ds: Dataset) -> None:
    data = np.column_stack([ds.X, ds.y])
    with open(path, "w", newline="") as fh:
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# splitting


def split_indices(n: int, spec: SplitSpec) -> tuple:
    if n < 10:
        raise DataError("need at least 10 rows to split")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_test = math.floor(n * spec.fractions[1])
    n_val = math.floor(n * spec.fractions[2])
    n_train = n - n_test - n_val
    return perm[:n_train], perm[n_train:n_train + n_test], perm[n_train + n_test:]


def split(ds: Dataset, spec: SplitSpec) -> tuple:
    """Seeded (train, test, val) split; the rounding remainder goes to train."""
    tr, te, va = split_indices(len(ds), spec)
    return ds.subset(tr), ds.subset(te), ds.subset(va)


def prepare(ds: Dataset, spec: SplitSpec) -> tuple:
    """Split, then standardize all parts with statistics of the train part."""
    train, test, val = split(ds, spec)
    st = Standardizer.fit(train.X, train.y if ds.task == "regression" else None)
    return train.standardized(st), test.standardized(st), val.standardized(st)


# ---------------------------------------------------------------------------
# toy letters


def parse_pbm(text: str) -> np.ndarray:
    """Parse a plain (P1) PBM into a boolean array of shape (height, width)."""
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != "P1":
        raise DataError("mask is not a plain PBM (P1) file")
    try:
        w, h = int(tokens[1]), int(tokens[2])
    except (IndexError, ValueError):
        raise DataError("malformed PBM header") from None
    bits = "".join(tokens[3:])
    if len(bits) != w * h or set(bits) - {"0", "1"}:
        raise DataError(f"PBM payload has {len(bits)} pixels, expected {w * h}")
    return np.frombuffer(bits.encode(), dtype=np.uint8).reshape(h, w) == ord("1")


def load_mask(path=None) -> np.ndarray:
    if path is None:
        text = resources.files("avdgp.resources").joinpath(MASK_RESOURCE).read_text()
    else:
        text = Path(path).read_text()
    return parse_pbm(text)


def label_points(X: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """1 where the pixel containing ``(x1, 1 - x2)`` is set."""
    h, w = mask.shape
    col = np.clip(np.floor(X[:, 0] * w).astype(int), 0, w - 1)
    row = np.clip(np.floor((1.0 - X[:, 1]) * h).astype(int), 0, h - 1)
    return mask[row, col].astype(np.float64)


def gen_toy_letters(n: int = 40000, seed: int = 0, mask: np.ndarray | None = None) -> Dataset:
    """Uniform points on the unit square labelled by the letter mask."""
    mask = load_mask() if mask is None else np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or not mask.any():
        raise DataError("mask must be a non-empty 2-d binary raster")
    X = np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, 2))
    return Dataset(X, label_points(X, mask), "binary")


# ---------------------------------------------------------------------------
# prior draws


def increment_statistic(path: np.ndarray) -> float:
    """Median absolute first difference of a function sampled on a grid."""
    return float(np.median(np.abs(np.diff(path))))


def _gp_layer_conventional(F, Z, kern, rng, jitter=1e-6):
    Kuu = gm.matern52(Z, Z, kern).value + jitter * np.eye(len(Z))
    Lc = np.linalg.cholesky(Kuu)
    u = Lc @ rng.standard_normal(len(Z))
    Kfu = gm.matern52(F, Z, kern).value
    return Kfu @ np.linalg.solve(Kuu, u)


def _gp_layer_amortized(F, M, kern, rng, jitter=1e-6):
    # per-input inducing points Z_n = x_n + b_m from a freshly initialised
    # affine bank; u_n ~ N(0, K(Z_n)) is drawn independently for every input
    b = rng.normal(0.0, 0.5, size=(M, 1))
    x = F.reshape(-1, 1)
    Z = x[:, None, :] + b[None]  # (G, M, 1)
    Kuu = gm.matern52(Z, Z, kern).value + jitter * np.eye(M)
    Lc = np.linalg.cholesky(Kuu)
    u = np.einsum("gij,gj->gi", Lc, rng.standard_normal((len(x), M)))
    Kfu = gm.matern52(x[:, None, :], Z, kern).value[:, 0, :]  # (G, M)
    return np.einsum("gm,gm->g", Kfu, np.linalg.solve(Kuu, u[..., None])[..., 0])


def sample_prior_paths(grid: np.ndarray, L: int, mode: str = "conventional", M: int | None = None,
                       seed: int = 0, n_paths: int = 1) -> tuple:
    """Draw compositions f^(1:L) on a 1-d grid with zero-mean layers.

    Conventional layers condition on M (default 128) global inducing points
    spread over the grid range and use the projected mean ``K_fu K_uu^-1 u``
    of a prior draw ``u``.  Amortized layers use M (default 4) per-input
    inducing points from a randomly initialised inference function.
    Returns ``(paths, stats)``: paths is (n_paths, L, G) with every
    intermediate composition, stats (n_paths, L) the increment statistic.
    """
    if mode not in ("conventional", "amortized"):
        raise ValueError(f"unknown prior mode '{mode}'")
    grid = np.asarray(grid, dtype=np.float64).ravel()
    M = M or (128 if mode == "conventional" else 4)
    kern = gm.KernelParams(0.0, 0.0)
    rng = np.random.default_rng(seed)
    paths = np.zeros((n_paths, L, len(grid)))
    Zg = np.linspace(grid.min(), grid.max(), M)[:, None]
    for k in range(n_paths):
        F = grid.copy()
        for l in range(L):
            if mode == "conventional":
                F = _gp_layer_conventional(F[:, None], Zg, kern, rng)
            else:
                F = _gp_layer_amortized(F, M, kern, rng)
            paths[k, l] = F
    stats = np.array([[increment_statistic(paths[k, l]) for l in range(L)] for k in range(n_paths)])
    return paths, stats
