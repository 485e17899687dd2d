"""Acceptance criteria, one test each, at the stated tolerances.

Criteria 7 and 8 train full models.  They run when AVDGP_RUN_SLOW=1;
criterion 7 can instead score finished runs from AVDGP_TOY_RUNS (a
directory with toy_s0..toy_s2 run folders written by ``avdgp train``), and
criterion 8 needs kin8nm.csv under AVDGP_DATA_DIR.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, stats

from avdgp import adcore as ad
from avdgp import cli
from avdgp import data
from avdgp import deepmodel as dm
from avdgp import gpmath as gm
from avdgp.metrics import crps_mixture
from avdgp.trainer import AdamState, adam_step

from instances import loss_fn, perturbed_model

SLOW = os.environ.get("AVDGP_RUN_SLOW") == "1"


def test_gradient_integrity(criterion):
    t0 = time.time()
    errs = {}
    for rule in dm.RULES:
        model, X, y = perturbed_model(rule, seed=0)
        f, arrays, names = loss_fn(model, X, y)
        errs[rule] = ad.check_gradient(f, arrays, step=1e-5)
        kinds = {n.split(".")[1] if n.startswith("layer") else n.split(".")[0] for n in names}
        expected = {"kernel", "likelihood"} | ({"affine", "mu_net", "sqrt_net"} if model.amortized else
                                              {"Z", "q_mu", "q_sqrt", "mean"})
        if model.quadrature:
            expected |= {"quad"}
        assert expected <= kinds, (rule, kinds)
    elapsed = time.time() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and elapsed < 60
    detail = ", ".join(f"{r} {e:.1e}" for r, e in errs.items())
    criterion(1, "gradient integrity", ok, f"max rel err {worst:.2e} (tol 1e-4); {detail}; {elapsed:.1f}s")
    assert ok


def test_prior_reproduction(criterion):
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(100):
        d, n, m = int(rng.integers(1, 4)), int(rng.integers(1, 8)), int(rng.integers(1, 8))
        kern = gm.KernelParams(rng.normal(0, 0.3), rng.normal(0, 0.3))
        Z = rng.normal(size=(m, d)) * 1.5
        X = rng.normal(size=(n, d)) * 1.5
        Kuu = gm.matern52(Z, Z, kern)
        chol = gm.jittered_cholesky(Kuu).value
        if i % 2:
            W = rng.normal(size=(d, 1))
            mf, mu = X @ W, Z @ W
        else:
            mf, mu = np.zeros((n, 1)), np.zeros((m, 1))
        out = gm.conditional(mf, np.diagonal(gm.matern52(X, X, kern).value), gm.matern52(X, Z, kern), Kuu,
                             mu.T, chol[None], mu)
        kff = np.diagonal(gm.matern52(X, X, kern).value)
        worst = max(worst, np.max(np.abs(out.mean.value - mf)), np.max(np.abs(out.var.value[:, 0] - kff)))
    ok = worst <= 1e-10
    criterion(2, "q(u)=p(u) gives the prior", ok, f"max abs deviation {worst:.2e} over 100 instances (tol 1e-10)")
    assert ok


def test_elbo_below_exact_marginal(criterion):
    rng = np.random.default_rng(0)
    X = rng.uniform(-2, 2, size=(20, 1))
    y = np.sin(2 * X[:, 0]) + 0.2 * rng.normal(size=20)
    model = dm.build_model("DS", [1, 1], [20], S=1, X_init=X, seed=0)
    assert np.array_equal(model.params["layer1.Z"], X)
    params = dict(model.params)
    # start q(u) at the prior so the optimizer does not begin from a KL of ~1e6
    Lk = gm.jittered_cholesky(gm.matern52(X, X, gm.KernelParams())).value
    raw = Lk.copy()
    idx = np.arange(20)
    raw[idx, idx] = np.log(np.expm1(np.diag(Lk)))
    params["layer1.q_sqrt"], params["layer1.q_mu"] = raw[None], np.zeros((1, 20))
    # the bound is compared at fixed hyperparameters, so only q(u) is optimized
    state = AdamState()
    for it in range(8000):
        state.lr = 0.01 if it < 4000 else (0.002 if it < 6000 else 0.0005)
        tape = ad.Tape()
        t = {k: tape.watch(v) for k, v in params.items()}
        g = ad.backward(tape, dm.loss(model, X, y, 20, t))
        params = adam_step(params, {k: g[t[k]] for k in ("layer1.q_mu", "layer1.q_sqrt")}, state)
    elbo = -float(dm.loss(model, X, y, 20, params).value)
    kern = gm.KernelParams(params["layer1.kernel.log_lengthscale"], params["layer1.kernel.log_variance"])
    s2 = math.exp(float(params["likelihood.log_obs_var"]))
    C = gm.matern52(X, X, kern).value + s2 * np.eye(20)
    L = np.linalg.cholesky(C)
    a = np.linalg.solve(L, y)
    exact = -0.5 * a @ a - np.log(np.diag(L)).sum() - 10 * math.log(2 * math.pi)
    gap = exact - elbo
    ok = gap >= -1e-6
    criterion(3, "ELBO bound", ok, f"optimized ELBO {elbo:.6f}, exact log marginal {exact:.6f}, gap {gap:.3e} "
                                   f"(must be >= -1e-6)")
    assert ok


def _crps_integral(x, w, m, s):
    cdf = lambda t: float(np.sum(w * stats.norm.cdf(t, m, s)))
    lo, hi = min(x, *(m - 12 * s)) - 1, max(x, *(m + 12 * s)) + 1
    pts = sorted(set([x, *m]))
    left = integrate.quad(lambda t: cdf(t) ** 2, lo, x, points=[p for p in pts if p < x] or None, limit=200,
                          epsabs=1e-13, epsrel=1e-12)[0]
    right = integrate.quad(lambda t: (1 - cdf(t)) ** 2, x, hi, points=[p for p in pts if p > x] or None,
                           limit=200, epsabs=1e-13, epsrel=1e-12)[0]
    return left + right


def test_crps_correctness(criterion):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        S = int(rng.integers(1, 5))
        w, m, s = rng.dirichlet(np.ones(S)), rng.normal(size=S) * 2, rng.uniform(0.1, 2, size=S)
        x = float(rng.normal() * 2)
        worst = max(worst, abs(crps_mixture(x, w, m, s) - _crps_integral(x, w, m, s)))
    single = crps_mixture(0.7, [1.0], [0.7], [1.0])
    ok = worst <= 1e-6 and abs(single - 0.233695) <= 1e-6
    criterion(4, "CRPS", ok, f"max |analytic - integral| {worst:.2e} on 50 mixtures (tol 1e-6); "
                             f"N(mu,1) at mu = {single:.8f} vs 0.233695")
    assert ok


def test_quadrature_matches_sampling(criterion):
    worst = 0.0
    for seed in range(10):
        ar2, X, _ = perturbed_model("AR2", seed=seed, S=4)
        ar2p, _, _ = perturbed_model("AR2P", seed=seed, S=4)
        xi = np.random.default_rng(seed).standard_normal((ar2.L - 1, 4))
        ar2p.params = dict(ar2.params, **{"quad.xi": xi, "quad.omega_logits": np.zeros(4)})
        a = dm.forward(ar2, X, eps=[xi[l] for l in range(ar2.L - 1)])
        b = dm.forward(ar2p, X)
        worst = max(worst, np.max(np.abs(a.mean.value - b.mean.value)), np.max(np.abs(a.var.value - b.var.value)))
    ok = worst <= 1e-12
    criterion(5, "quadrature/MC equivalence", ok, f"max per-component deviation {worst:.2e} (tol 1e-12)")
    assert ok


def test_prior_degeneracy(criterion):
    t0 = time.time()
    spec = json.loads(cli._config_text("prior_demo"))
    lo, hi, n = spec["grid"]
    grid = np.linspace(lo, hi, int(n))
    L = spec["L"]
    conv_drop, amort_stable, ratios = 0, 0, []
    for seed in spec["seeds"]:
        _, sc = data.sample_prior_paths(grid, L, "conventional", spec["M_conventional"], seed)
        _, sa = data.sample_prior_paths(grid, L, "amortized", spec["M_amortized"], seed)
        conv_drop += sc[0, L - 1] < sc[0, 0]
        r = sa[0, L - 1] / sa[0, 0]
        amort_stable += 0.2 <= r <= 5.0
        ratios.append((sc[0, L - 1] / sc[0, 0], r))
    elapsed = time.time() - t0
    k = len(spec["seeds"])
    ok = conv_drop >= 4 and amort_stable >= 4 and elapsed < 120
    detail = "; ".join(f"conv {c:.2g} amort {a:.2g}" for c, a in ratios)
    criterion(6, "prior degeneracy", ok, f"conventional L={L}/L=1 drops in {conv_drop}/{k}, amortized within x5 in "
                                         f"{amort_stable}/{k} [{detail}]; {elapsed:.1f}s")
    assert ok


def _toy_reports():
    if SLOW:
        t0 = time.time()
        reports = []
        root = Path(os.environ.get("AVDGP_SLOW_OUT", "acceptance_runs"))
        for seed in range(3):
            cfg = cli.load_config("toy_3layer_m64", [f"seed={seed}"])
            reports.append(cli.run_training(cfg, root / f"toy_s{seed}", quiet=True))
        return reports, f"trained here in {(time.time() - t0) / 60:.1f} min"
    runs = os.environ.get("AVDGP_TOY_RUNS")
    if runs:
        root = Path(runs)
        reports = [json.loads((root / f"toy_s{s}" / "test_report.json").read_text()) for s in range(3)]
        times = root / "toy_times.txt"
        note = f"scored from finished runs in {root}"
        if times.exists():
            secs = [int(line.split()[-1]) for line in times.read_text().splitlines() if line.strip()]
            note += f", {sum(secs) / 60:.1f} min for {len(secs)} seeds"
        return reports, note
    return None, None


def test_toy_classification(criterion):
    reports, note = _toy_reports()
    if reports is None:
        pytest.skip("set AVDGP_RUN_SLOW=1 (or AVDGP_TOY_RUNS) to run the toy classification criterion")
    errs = [r["error_rate"] for r in reports]
    mean = float(np.mean(errs))
    ok = mean <= 0.06
    criterion(7, "toy classification", ok, f"test error {', '.join(f'{e:.2%}' for e in errs)}; mean {mean:.2%} "
                                           f"(must be <= 6%); {note}")
    assert ok


def test_kin8nm_regression(criterion):
    root = os.environ.get("AVDGP_DATA_DIR")
    if not SLOW or not root or not (Path(root) / "kin8nm.csv").exists():
        pytest.skip("needs AVDGP_RUN_SLOW=1 and kin8nm.csv under AVDGP_DATA_DIR")
    out = Path(os.environ.get("AVDGP_SLOW_OUT", "acceptance_runs"))
    reports = [cli.run_training(cli.load_config("kin8nm_ar2p", [f"seed={s}"]), out / f"kin8nm_s{s}", quiet=True)
               for s in range(2)]
    ok = all(r["rmse"] <= 0.30 and r["nll"] <= 0.25 for r in reports)
    detail = "; ".join(f"seed {i}: rmse {r['rmse']:.3f} nll {r['nll']:.3f}" for i, r in enumerate(reports))
    criterion(8, "kin8nm regression (soft)", ok, f"{detail} (need rmse <= 0.30, nll <= 0.25)")
    assert ok


def test_ar1_kl_unbiased(criterion):
    model, X, _ = perturbed_model("AR1", seed=0)
    rng = np.random.default_rng(0)
    small = np.array([float(dm.forward_ar1(model, X, 1, rng).kl.value) for _ in range(10_000)])
    big = float(dm.forward_ar1(model, X, 10_000, np.random.default_rng(1)).kl.value)
    se = small.std(ddof=1) / math.sqrt(len(small))
    z = abs(small.mean() - big) / se
    ok = z <= 3.0
    criterion(9, "AR1 KL unbiasedness", ok, f"mean of 1e4 S=1 estimates {small.mean():.6f}, S=1e4 estimate "
                                            f"{big:.6f}, |diff| = {z:.2f} SE (must be <= 3)")
    assert ok


def test_determinism(criterion, tmp_path, capsys):
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(80, 2))
    np.savetxt(tmp_path / "d.csv", np.column_stack([X, np.sin(3 * X[:, 0]) + X[:, 1]]), delimiter=",")
    tiny = ["--set", f'dataset="{tmp_path / "d.csv"}"', "--set", "L=2", "--set", "dims=[2]", "--set", "M=[3,3]",
            "--set", "S=4", "--set", "epochs=3", "--set", "batch=20", "--quiet"]
    for tag in ("a", "b"):
        assert cli.run(["train", "--config", "kin8nm_ar2p", *tiny, "--out", str(tmp_path / tag)]) == 0
    same_ck = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                  for f in ("checkpoint.ck", "best.ck"))
    outputs = []
    for _ in range(2):
        capsys.readouterr()
        cli.run(["eval", "--checkpoint", str(tmp_path / "a" / "checkpoint.ck"), "--data",
                 str(tmp_path / "a" / "test.csv")])
        outputs.append(capsys.readouterr().out)
    ok = same_ck and outputs[0] == outputs[1]
    with capsys.disabled():
        criterion(10, "determinism", ok, f"checkpoints bit-identical: {same_ck}; AR2P eval output identical: "
                                         f"{outputs[0] == outputs[1]}")
    assert ok


def test_complexity_accounting(criterion):
    ar1 = dm.build_model("AR1", [2, 4, 3, 1], [8, 4, 4], S=7)
    ar2 = dm.build_model("AR2", [2, 4, 3, 1], [8, 4, 4], S=7)
    r1, r2 = dm.cost_report(ar1, B=100), dm.cost_report(ar2, B=100)
    ok = r1[0].time == r2[0].time and all(a.time == 7 * b.time for a, b in zip(r1[1:], r2[1:]))
    detail = ", ".join(f"layer {a.layer}: {a.time}/{b.time}" for a, b in zip(r1, r2))
    criterion(11, "complexity accounting", ok, f"AR1/AR2 time counts with S=7: {detail}")
    assert ok
