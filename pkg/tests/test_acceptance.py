"""Acceptance suite: one PASS/FAIL line per criterion, printed in the
terminal summary.  Criteria 7-9 train models and take several minutes."""

import dataclasses
import math
import time

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from conftest import record, tiny_model
from nesydm import oracles
from nesydm.cli import build_arch, build_data, build_program, cmd_train
from nesydm.config import preset
from nesydm.diffusion import get_schedule, make_rng
from nesydm.inference import estimate_marginals, first_hitting_sample, time_discretized_sample
from nesydm.metrics import ece
from nesydm.programs import GridSpec, XorProgram, dijkstra_path, path_cost
from nesydm.tasks import mnist_paths
from nesydm.training import TrainHyper, mdm_nelbo_estimate, nelbo_value_estimate
from nesydm.verify import cnf_gap, check_gradients, rloo_bias, snis_tv

sched = get_schedule()


def test_c01_rloo_unbiased():
    t0 = time.perf_counter()
    zmax, z, exact, mean = rloo_bias(n_rep=10_000, S=1024, chunks=200, seed=0)
    secs = time.perf_counter() - t0
    ok = zmax <= 3.0 and secs < 30
    detail = (
        f"max |mean - exact| / SE = {zmax:.2f} over {z.size} coords (tol 3), "
        f"{int((z > 3).sum())} coords beyond 3 SE, max abs bias {np.abs(mean - exact).max():.2e}, {secs:.1f}s"
    )
    assert record(1, "RLOO unbiasedness (S=1024, 1e4 bundles)", ok, detail)


def test_c02_nelbo_bound():
    t0 = time.perf_counter()
    worst, fails = math.inf, 0
    prog = XorProgram()
    for k in range(20):
        params, x = tiny_model(seed=100 + k)
        y0 = np.array([k % 2])
        nll = oracles.exact_nesydm_nll(params, x, y0, prog)
        mean, se = nelbo_value_estimate(params, x, y0, prog, TrainHyper(), sched, make_rng(k), 10_000, "exact")
        margin = (mean - nll) / se
        worst = min(worst, margin)
        fails += mean < nll - 3 * se
    secs = time.perf_counter() - t0
    ok = fails == 0 and secs < 60
    assert record(2, "NELBO bound", ok, f"{fails}/20 draws below -log p - 3SE, min (L - nll)/SE = {worst:.2f}, {secs:.1f}s")


def test_c03_discrete_to_continuous():
    params, x = tiny_model(seed=11)
    w0 = np.array([1, 0])
    l_inf = oracles.exact_mdm_nelbo_continuous(params, x, w0)
    Ts = (1, 2, 4, 8, 16, 32)
    rng = make_rng(0)
    est = [mdm_nelbo_estimate(params, x, w0, sched, rng, 100_000, T) for T in Ts]
    gaps = [abs(m - l_inf) for m, _ in est]
    ses = [se for _, se in est]
    monotone = all(gaps[j + 1] <= gaps[j] + 3 * math.hypot(ses[j], ses[j + 1]) for j in range(len(Ts) - 1))
    floor = gaps[-1] <= 3 * ses[-1]
    exact_gaps = [abs(oracles.exact_mdm_nelbo_discrete(params, x, w0, T, sched) - l_inf) for T in Ts]
    exact_monotone = all(b <= a for a, b in zip(exact_gaps, exact_gaps[1:]))
    detail = (
        "MC |L_T - L_inf| = " + ", ".join(f"T{T}:{g:.4f}+-{s:.4f}" for T, g, s in zip(Ts, gaps, ses))
        + f"; exact gaps strictly shrinking: {exact_monotone} ({exact_gaps[0]:.4f} -> {exact_gaps[-1]:.5f})"
    )
    assert record(3, "discrete -> continuous NELBO", monotone and floor and exact_monotone, detail)


def test_c04_snis():
    uniform = snis_tv(trials=10_000, K=64, beta=20.0, seed=0)
    skewed = snis_tv(trials=10_000, K=64, beta=20.0, seed=1, probs=[[0.8, 0.2], [0.3, 0.7]])
    ok = uniform < 0.05 and skewed < 0.05
    assert record(4, "SNIS correctness", ok, f"TV uniform={uniform:.4f}, skewed={skewed:.4f} (tol 0.05)")


def _agreement(condition):
    params, x = tiny_model(seed=0, condition=condition)
    n = 100_000
    fh = first_hitting_sample(params, x, sched, make_rng(1), n=n)
    td = time_discretized_sample(params, x, 2, sched, make_rng(2), n=n)
    exact = oracles.exact_reverse_distribution(params, x, sched)
    keys = sorted(exact)
    ef, et = oracles.empirical(fh), oracles.empirical(td)
    table = np.array([[ef.get(k, 0.0) * n for k in keys], [et.get(k, 0.0) * n for k in keys]])
    table = table[:, table.sum(axis=0) > 0]
    p = chi2_contingency(table)[1]
    return p, oracles.total_variation(ef, exact), oracles.total_variation(et, exact)


def test_c05_sampler_agreement():
    p, tv_fh, tv_td = _agreement(condition=True)
    ok = p > 0.01 and tv_fh < 0.02 and tv_td < 0.02
    p_u, fh_u, td_u = _agreement(condition=False)
    detail = (
        f"w^t-conditioned model: chi2 p={p:.3g}, TV(first-hitting, exact)={tv_fh:.4f}, "
        f"TV(time-discretised, exact)={tv_td:.4f}; unconditioned model: p={p_u:.3g}, TVs {fh_u:.4f}/{td_u:.4f}"
    )
    assert record(5, "sampler agreement (T=W)", ok, detail)


def test_c06_gradient_checks():
    results = check_gradients(n_models=5, tol=1e-4, seed=0)
    ok = all(r.passed for r in results)
    detail = ", ".join(f"{r.name[9:]}={r.measured:.2e}" for r in results) + " (tol 1e-4)"
    assert record(6, "gradient checks", ok, detail)


@pytest.mark.slow
def test_c07_rs_awareness(tmp_path):
    cfg = preset("xor")
    lines, ok = [], True
    for seed in range(10):
        run = dataclasses.replace(cfg, seed=seed)
        t0 = time.perf_counter()
        params, row = cmd_train(run, tmp_path / f"s{seed}")
        secs = time.perf_counter() - t0
        r = make_rng(run.seed).spawn(4)
        _, test = build_data(run, r[0])
        m = estimate_marginals(params, test.x[:500], 1000, sched, make_rng(1000 + seed))
        e = ece(m, test.w_true[:500])
        lo, hi = float(m[..., 1].min()), float(m[..., 1].max())
        good = row["label_acc"] >= 0.99 and 0.4 <= lo and hi <= 0.6 and e < 0.1 and secs < 300
        ok &= good
        lines.append(f"s{seed}:acc={row['label_acc']:.3f} marg=[{lo:.3f},{hi:.3f}] ece={e:.3f} {secs:.0f}s")
    assert record(7, "RS-awareness on XOR (10 seeds)", ok, "; ".join(lines))


@pytest.mark.slow
@pytest.mark.skipif(not all(map(__import__("os").path.exists, mnist_paths("train") + mnist_paths("test"))), reason="MNIST not available")
def test_c08_mnist_addition(tmp_path):
    cfg = preset("addition")
    t0 = time.perf_counter()
    _, row = cmd_train(cfg, tmp_path)
    secs = time.perf_counter() - t0
    ok = row["label_acc"] >= 0.90 and cfg.epochs <= 20 and secs < 900
    detail = f"held-out exact match {row['label_acc']:.4f} (tol 0.90), concept acc {row['concept_acc']:.4f}, {cfg.epochs} epochs, {secs:.0f}s"
    assert record(8, "MNIST addition N=1", ok, detail)


@pytest.mark.slow
def test_c09_path_planning(tmp_path):
    cfg = preset("path")
    assert cfg.side == 4 and cfg.noise == 0.5
    t0 = time.perf_counter()
    _, row = cmd_train(cfg, tmp_path)
    secs = time.perf_counter() - t0
    ok = row["label_acc"] >= 0.95 and secs < 600
    detail = f"cost-match {row['label_acc']:.4f} (tol 0.95), cell accuracy {row['concept_acc']:.4f}, {secs:.0f}s"
    assert record(9, "4x4 path planning, sigma=0.5", ok, detail)


def test_c10_cnf_equivalence():
    gap = cnf_gap(n_formulas=100, seed=0)
    assert record(10, "CNF log-product equivalence", gap < 1e-9, f"max |difference| = {gap:.2e} over 100 formulas (tol 1e-9)")


def test_c11_dijkstra_oracle():
    rng = make_rng(0)
    bad = 0
    for side, count in ((3, 500), (4, 100)):
        grid = GridSpec(side)
        idx = rng.integers(0, 5, size=(count, grid.n_cells))
        paths = dijkstra_path(grid, idx)
        for i, p in zip(idx, paths):
            bad += path_cost(grid, i, p, exact=True) != oracles.brute_force_shortest_path(grid, i)
    assert record(11, "Dijkstra vs exhaustive search", bad == 0, f"{bad} mismatches over 500 3x3 + 100 4x4 grids")


def test_c12_ece_sanity():
    rng = make_rng(0)
    n = 100_000
    conf = rng.uniform(0.5, 1.0, n)
    truth = (rng.random(n) < conf).astype(int)
    calibrated = ece(np.stack([1 - conf, conf], axis=1), truth)
    sure = rng.uniform(0.99, 1.0, n)
    anti = ece(np.stack([1 - sure, sure], axis=1), np.zeros(n, int))
    ok = calibrated < 0.02 and anti > 0.98
    assert record(12, "ECE sanity", ok, f"calibrated {calibrated:.4f} (tol <0.02), anti-calibrated {anti:.4f} (tol >0.98)")
