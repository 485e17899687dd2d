"""Command-line front end: ``avdgp <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import data as dt
from . import deepmodel as dm
from . import trainer as tr
from .adcore import CholeskyError, NonFiniteError
from .config import ConfigError, ModelConfig

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
CHECKPOINT = "checkpoint.ck"
BEST_CHECKPOINT = "best.ck"


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# config and data resolution


def shipped_configs() -> list:
    root = resources.files("avdgp.configs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _config_text(ref: str) -> str:
    path = Path(ref)
    if path.exists():
        return path.read_text()
    name = ref[:-5] if ref.endswith(".json") else ref
    if name in shipped_configs():
        return resources.files("avdgp.configs").joinpath(name + ".json").read_text()
    raise ConfigError(f"config '{ref}' is neither a file nor a shipped config ({', '.join(shipped_configs())})")


def load_config(ref: str, overrides: list | None = None) -> ModelConfig:
    """Read a config file (or a shipped config by name) and apply ``key=value`` overrides."""
    try:
        d = json.loads(_config_text(ref))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{ref}: invalid JSON ({e})") from None
    for item in overrides or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"override '{item}' is not key=value")
        try:
            d[key] = json.loads(val)
        except json.JSONDecodeError:
            d[key] = val
    return ModelConfig.from_dict(d)


def resolve_data_path(ref: str) -> Path:
    """Existing path as given, else relative to ``$AVDGP_DATA_DIR``."""
    path = Path(ref)
    if path.exists():
        return path
    root = os.environ.get("AVDGP_DATA_DIR")
    if root and not path.is_absolute() and (Path(root) / path).exists():
        return Path(root) / path
    raise dt.DataError(f"dataset '{ref}' not found (AVDGP_DATA_DIR={root or 'unset'})")


def load_dataset(cfg: ModelConfig) -> dt.Dataset:
    if cfg.dataset == "toy":
        return dt.gen_toy_letters(cfg.toy_n, seed=_split_seed(cfg))
    return dt.load_csv(resolve_data_path(cfg.dataset), cfg.label_column, cfg.task, cfg.header)


def _split_seed(cfg: ModelConfig) -> int:
    return cfg.seed if cfg.split_seed is None else cfg.split_seed


# ---------------------------------------------------------------------------
# training / evaluation drivers


def run_training(cfg: ModelConfig, out_dir, quiet: bool = False) -> dict:
    """Train from a config; writes checkpoints, the epoch log and the raw splits.

    Returns the test-set report of the final-epoch parameters.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw = load_dataset(cfg)
    tr_raw, te_raw, va_raw = dt.split(raw, dt.SplitSpec(_split_seed(cfg), tuple(cfg.split)))
    st = dt.Standardizer.fit(tr_raw.X, tr_raw.y if cfg.task == "regression" else None)
    if cfg.val_max is not None and len(va_raw) > cfg.val_max:
        va_raw = va_raw.subset(np.arange(cfg.val_max))
    train_ds, test_ds, val_ds = (d.standardized(st) for d in (tr_raw, te_raw, va_raw))
    for name, part in (("train", tr_raw), ("test", te_raw), ("val", va_raw)):
        dt.save_csv(out / f"{name}.csv", part)
    model = tr.model_from_config(cfg, train_ds.X)
    on_epoch = None if quiet else (lambda row: _log(json.dumps(row)))
    result = tr.train(model, train_ds, val_ds, cfg, on_epoch)
    extra = {"config": cfg.to_dict(), "standardizer": st.to_dict(), "d_in": int(train_ds.X.shape[1])}
    tr.save_checkpoint(out / CHECKPOINT, result.model.params, cfg.hash(), cfg.epochs, extra)
    tr.save_checkpoint(out / BEST_CHECKPOINT, result.best_params, cfg.hash(), result.best_epoch, extra)
    tr.write_log_csv(out / "log.csv", result.log)
    report = tr.evaluate(result.model, test_ds, cfg.seed).to_dict() if len(test_ds) else {}
    (out / "test_report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report


def model_from_checkpoint(path) -> tuple:
    """Rebuild ``(model, cfg, standardizer)`` from a checkpoint file."""
    params, header = tr.load_checkpoint(path)
    if "config" not in header:
        raise tr.CorruptCheckpoint(f"{path}: header carries no config")
    cfg = ModelConfig.from_dict(header["config"])
    if cfg.hash() != header["config_hash"]:
        raise tr.ConfigMismatch(f"{path}: stored config does not match its hash")
    d_in = int(header["d_in"])
    model = tr.model_from_config(cfg, np.zeros((0, d_in)))
    missing = sorted(set(model.params) ^ set(params))
    if missing:
        raise tr.CorruptCheckpoint(f"{path}: parameter set differs from the config ({missing[0]}, ...)")
    for name, arr in params.items():
        if arr.shape != np.shape(model.params[name]):
            raise tr.CorruptCheckpoint(f"{path}: '{name}' has shape {arr.shape}")
    model.params = params
    return model, cfg, dt.Standardizer.from_dict(header["standardizer"])


def evaluate_checkpoint(path, data_path, label_column: int | None = None, header: bool | None = None) -> dict:
    model, cfg, st = model_from_checkpoint(path)
    # split CSVs written by ``train`` carry the label last and no header
    lc = -1 if label_column is None else label_column
    ds = dt.load_csv(resolve_data_path(data_path), lc, cfg.task, bool(header))
    if ds.X.shape[1] != len(st.x_mean):
        raise dt.DataError(f"{data_path}: {ds.X.shape[1]} features, checkpoint expects {len(st.x_mean)}")
    return tr.evaluate(model, ds.standardized(st), cfg.seed).to_dict()


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_toy(a) -> int:
    mask = dt.load_mask(a.mask) if a.mask else None
    dt.save_csv(a.out, dt.gen_toy_letters(a.n, a.seed, mask))
    return 0


def cmd_train(a) -> int:
    cfg = load_config(a.config, a.set)
    report = run_training(cfg, a.out, a.quiet)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_eval(a) -> int:
    report = evaluate_checkpoint(a.checkpoint, a.data, a.label_column, a.header)
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_sample_prior(a) -> int:
    spec = json.loads(_config_text(a.config)) if a.config else {}
    lo, hi, n = spec.get("grid", [-3.0, 3.0, 400])
    L = a.L or spec.get("L", 6)
    seeds = spec.get("seeds", list(range(5))) if a.seeds is None else list(range(a.seeds))
    grid = np.linspace(lo, hi, int(n))
    prefix = Path(a.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{prefix}_paths.csv", "w", newline="") as fp, open(f"{prefix}_stats.csv", "w", newline="") as fs:
        wp, ws = csv.writer(fp), csv.writer(fs)
        wp.writerow(["mode", "seed", "layer", "x", "f"])
        ws.writerow(["mode", "seed", "layer", "median_abs_increment"])
        for mode in ("conventional", "amortized"):
            M = spec.get(f"M_{mode}")
            for seed in seeds:
                paths, stats = dt.sample_prior_paths(grid, L, mode, M, seed)
                for l in range(L):
                    ws.writerow([mode, seed, l + 1, repr(float(stats[0, l]))])
                    for x, f in zip(grid, paths[0, l]):
                        wp.writerow([mode, seed, l + 1, repr(float(x)), repr(float(f))])
    return 0


def split_inducing(total: int, L: int) -> list:
    """Per-layer inducing counts for a total budget in the ratio
    1:1, 2:1:1, 4:2:1:1, ... (``64, 3 -> [32, 16, 16]``); the rounding
    remainder goes to the first layer."""
    if L == 1:
        return [total]
    weights = [2 ** (L - 2 - l) for l in range(L - 1)] + [1]
    unit = sum(weights)
    M = [total * w // unit for w in weights]
    if min(M) < 1:
        raise ConfigError(f"|M|={total} is too small for {L} layers")
    M[0] += total - sum(M)
    return M


def _bench_cell(job: tuple) -> dict:
    cfg_dict, out_dir = job
    cfg = ModelConfig.from_dict(cfg_dict)
    return run_training(cfg, out_dir, quiet=True)


def cmd_benchmark(a) -> int:
    base = load_config(a.config, a.set).to_dict()
    seeds = list(range(a.seeds))
    cells = []
    if a.suite == "toy":
        for L in [int(v) for v in a.L.split(",")]:
            for M in [int(v) for v in a.M.split(",")]:
                d = dict(base, L=L, M=split_inducing(M, L), dims=(base["dims"] + [2] * L)[:L - 1] or [])
                cells.append(({"L": L, "M": M, "rule": d["rule"]}, d))
    else:
        for rule in a.rules.split(","):
            inf = "global" if rule in ("DS", "DSPP") else base["inference_fn"]
            cells.append(({"L": base["L"], "M": sum(base["M"]), "rule": rule}, dict(base, rule=rule, inference_fn=inf)))
    out = Path(a.out)
    work = out.parent / (out.stem + "_runs")
    jobs = []
    for key, d in cells:
        ModelConfig.from_dict(d)  # fail fast on a bad cell
        for s in seeds:
            tag = f"{key['rule']}_L{key['L']}_M{key['M']}_s{s}"
            jobs.append((dict(d, seed=s), str(work / tag)))
    if a.jobs > 1:
        with ProcessPoolExecutor(a.jobs) as ex:
            reports = list(ex.map(_bench_cell, jobs))
    else:
        reports = [_bench_cell(j) for j in jobs]
    metric = "error_rate" if base["task"] == "binary" else "nll"
    rows = []
    for i, (key, _) in enumerate(cells):
        vals = np.array([r[metric] for r in reports[i * len(seeds):(i + 1) * len(seeds)]])
        rows.append(dict(key, metric=metric, mean=float(vals.mean()), std=float(vals.std()), n_seeds=len(vals)))
    order = np.argsort([r["mean"] for r in rows], kind="stable")
    for rank, i in enumerate(order, start=1):
        rows[i]["rank"] = rank
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["rule", "L", "M", "metric", "mean", "std", "n_seeds", "rank"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return 0


def cmd_cost(a) -> int:
    cfg = load_config(a.config, a.set)
    d_in = a.d_in
    model = tr.model_from_config(cfg, np.zeros((0, d_in)))
    rows = dm.cost_report(model, a.B, a.S)
    print(f"rule={cfg.rule} L={cfg.L} B={a.B} S={a.S or cfg.S} params={dm.n_parameters(model)}")
    print(f"{'layer':>5} {'mult':>8} {'gp_time':>14} {'amortizer':>14} {'time':>14} {'memory':>14}")
    for r in rows:
        print(f"{r.layer:>5} {r.multiplier:>8} {r.gp_time:>14} {r.amortizer_time:>14} {r.time:>14} {r.memory:>14}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="avdgp", description="Amortized variational deep Gaussian processes.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="write the letters toy classification CSV")
    p.add_argument("--n", type=int, default=40000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask", help="PBM P1 mask (default: the shipped DGP mask)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True, help="config path or shipped name")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", type=int)
    p.add_argument("--header", action="store_true")
    p.add_argument("--out", help="write the JSON report here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample-prior", help="draw compositional prior paths on a 1-d grid")
    p.add_argument("--config", default="prior_demo")
    p.add_argument("--L", type=int, help="depth; every layer up to it is recorded")
    p.add_argument("--seeds", type=int, help="number of seeds, 0..N-1")
    p.add_argument("--out", required=True, help="output prefix (_paths.csv, _stats.csv)")
    p.set_defaults(func=cmd_sample_prior)

    p = sub.add_parser("benchmark", help="run a config matrix and write a rankings table")
    p.add_argument("--suite", choices=("toy", "rules"), default="toy")
    p.add_argument("--config", default="toy_3layer_m64")
    p.add_argument("--M", default="16,32,64,128", help="total inducing budgets (toy suite)")
    p.add_argument("--L", default="1,2,3,4", help="depths (toy suite)")
    p.add_argument("--rules", default="AR1,AR2,AR2P,AR2PP,DS,DSPP", help="rules (rules suite)")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, 0..N-1")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("cost", help="print the per-layer complexity report")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--d-in", type=int, default=2)
    p.add_argument("--B", type=int, default=100)
    p.add_argument("--S", type=int)
    p.set_defaults(func=cmd_cost)
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, dt.DataError, tr.CorruptCheckpoint, tr.ConfigMismatch) as e:
        _log(f"error: {e}")
        return EXIT_CONFIG
    except (CholeskyError, NonFiniteError, tr.NonFiniteGradient) as e:
        _log(f"numeric failure: {e}")
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
