"""Self-checks behind ``nesydm verify``.

Each check compares a production routine against an independent reference
on a tiny instance and returns a :class:`CheckResult`.  Estimators under test
can be swapped in through ``estimators`` so that deliberately broken variants
can be shown to fail.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from nesydm import oracles
from nesydm.diffusion import MASK, get_schedule, make_rng, reverse_posterior_pmf
from nesydm.inference import first_hitting_sample, time_discretized_sample
from nesydm.model import (
    Architecture,
    backward_entropy,
    backward_logits,
    backward_logprob,
    entropy_rows,
    forward_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from nesydm.programs import GridSpec, XorProgram, dijkstra_path, path_cost, random_cnf
from nesydm.training import (
    conditional_entropy_grad,
    exact_log_wmc,
    rloo_dlogits,
    snis_select,
    stable_log_rewards,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    detail: str = ""


def _tiny(rng, W=2, V=2, x_dim=2, hidden=(4,), layout="joint", condition=True, context=True):
    arch = Architecture(x_dim, W, V, hidden=hidden, layout=layout, context=context, condition=condition)
    return init_params(arch, rng, scale=1.5), rng.normal(size=x_dim)


def _rel(a, b):
    a, b = a.flat(), b.flat()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


# ---------------------------------------------------------------------------
# Gradients against finite differences
# ---------------------------------------------------------------------------


def check_gradients(n_models=5, tol=1e-4, seed=0):
    """Analytic gradients of log-likelihood, entropy and conditional entropy
    against central finite differences on random tiny networks."""
    rng = make_rng(seed)
    prog = XorProgram()
    worst = {"logprob": 0.0, "entropy": 0.0, "conditional_entropy": 0.0}
    for k in range(n_models):
        layout = ("joint", "shared")[k % 2]
        params, x = _tiny(rng, layout=layout)
        wt = np.array([MASK, 1]) if k % 3 else np.array([MASK, MASK])
        w0 = np.array([int(rng.integers(2)), wt[1] if wt[1] != MASK else 0])

        def lp(p):
            c = forward_batch(p, x, wt)
            return float(c.log_probs[0, np.arange(2), w0][wt == MASK].sum())

        worst["logprob"] = max(worst["logprob"], _rel(backward_logprob(params, x, wt, w0), oracles.finite_difference(params, lp)))

        def ent(p):
            return float(entropy_rows(forward_batch(p, x, np.full(2, MASK))).sum())

        worst["entropy"] = max(worst["entropy"], _rel(backward_entropy(params, x)[0], oracles.finite_difference(params, ent)))
        y0 = np.array([int(rng.integers(2))])

        def cent(p):
            return conditional_entropy_grad(p, x, y0, prog)[1]

        g = conditional_entropy_grad(params, x, y0, prog)[0]
        worst["conditional_entropy"] = max(worst["conditional_entropy"], _rel(g, oracles.finite_difference(params, cent)))
    return [CheckResult(f"gradient_{k}", v, tol, v < tol, "max relative error") for k, v in worst.items()]


# ---------------------------------------------------------------------------
# RLOO
# ---------------------------------------------------------------------------


def rloo_setup(seed=0):
    """Frozen 3-concept, 2-output XOR model with a partially masked input."""
    rng = make_rng(seed)
    params, x = _tiny(rng, W=3, V=2, hidden=(2,))
    prog = XorProgram(pairs=((0, 1), (1, 2)))
    wt = np.array([MASK, 1, MASK])
    y0 = np.array([1, 0])
    return params, x, wt, y0, prog, 0.6


def rloo_bias(n_rep=10_000, S=1024, chunks=200, seed=0, estimator=rloo_dlogits):
    """Mean of ``n_rep`` RLOO gradient estimates versus the exact gradient.

    Returns ``(max |z|, z-scores, exact, mean)``; standard errors come from
    ``chunks`` independent chunk means.
    """
    params, x, wt, y0, prog, t = rloo_setup(seed)
    sched = get_schedule()
    exact = oracles.exact_output_grad(params, x, wt, y0, prog, t, sched).flat()
    rng = make_rng(seed + 1)
    per = n_rep // chunks
    cache = forward_batch(params, np.repeat(x[None], per, 0), np.repeat(wt[None], per, 0))
    ys = np.repeat(y0[None], per, 0)
    means = np.empty((chunks, exact.size))
    for c in range(chunks):
        dl, _, _ = estimator(cache, ys, prog, S, t, sched, rng)
        means[c] = backward_logits(params, cache, dl).flat() / per
    mean = means.mean(axis=0)
    se = means.std(axis=0, ddof=1) / math.sqrt(chunks)
    z = np.abs(mean - exact) / np.maximum(se, 1e-15)
    return float(z.max()), z, exact, mean


def check_rloo(n_rep=2000, S=4096, z_tol=4.5, seed=0, estimator=rloo_dlogits):
    """RLOO mean against the exact gradient.  The estimator divides by an
    estimated match rate, so its bias is O(1/S); ``S`` here is large enough
    that the bias sits well below the Monte-Carlo error of ``n_rep`` draws."""
    zmax, z, _, _ = rloo_bias(n_rep, S, 100, seed, estimator)
    return [CheckResult("rloo_mean", zmax, z_tol, zmax < z_tol, f"max z over {z.size} coordinates")]


# ---------------------------------------------------------------------------
# SNIS
# ---------------------------------------------------------------------------


def snis_tv(trials=10_000, K=64, beta=20.0, seed=0, probs=None):
    """TV distance between SNIS draws and the exact constrained conditional
    for a 2-bit XOR with ``y0 = 1``."""
    rng = make_rng(seed)
    prog = XorProgram()
    probs = np.full((2, 2), 0.5) if probs is None else np.asarray(probs, dtype=np.float64)
    y0 = np.array([1])
    draws = snis_select(np.broadcast_to(probs, (trials, 2, 2)), prog, np.repeat(y0[None], trials, 0), K, beta, rng)
    return oracles.total_variation(oracles.empirical(draws), oracles.exact_conditional(probs, prog, y0))


def check_snis(trials=4000, tol=0.05, seed=0):
    out = [CheckResult("snis_tv", v := snis_tv(trials, seed=seed), tol, v < tol)]
    w = stable_log_rewards(np.array([[0, 3, 100]]), beta=1e4)
    ok = bool(np.isfinite(w).all() and w.max() > 0)
    out.append(CheckResult("snis_stable_reward", float(w.max()), 0.0, ok, "finite with positive best weight"))
    return out


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


def sampler_tv(n=20_000, seed=0, T=None, condition=True):
    """TV between a sampler's empirical law and the exact law.

    ``T=None`` checks first-hitting against the exact reverse process;
    otherwise the time-discretised sampler against its exact ``T``-step law.
    """
    rng = make_rng(seed)
    params, x = _tiny(rng, condition=condition)
    sched = get_schedule()
    if T is None:
        exact = oracles.exact_reverse_distribution(params, x, sched)
        samples = first_hitting_sample(params, x, sched, rng, n=n)
    else:
        exact = oracles.exact_tstep_distribution(params, x, T, sched)
        samples = time_discretized_sample(params, x, T, sched, rng, n=n)
    return oracles.total_variation(oracles.empirical(samples), exact)


def check_samplers(n=20_000, tol=0.02, seed=0):
    fh = sampler_tv(n, seed)
    td = sampler_tv(n, seed, T=3)
    return [
        CheckResult("first_hitting_law", fh, tol, fh < tol),
        CheckResult("time_discretized_law", td, tol, td < tol),
    ]


def check_posterior(seed=0, cases=50, tol=1e-12):
    rng = make_rng(seed)
    sched = get_schedule()
    worst = 0.0
    for _ in range(cases):
        W = int(rng.integers(1, 5))
        w0 = rng.integers(0, 3, size=W)
        t = float(rng.uniform(0.05, 1.0))
        s = float(rng.uniform(0.0, t * 0.999))
        wt = np.where(rng.random(W) < t, MASK, w0)
        total = 0.0
        for bits in np.ndindex(*(2,) * W):
            ws = np.where(np.array(bits, dtype=bool), MASK, w0)
            total += reverse_posterior_pmf(ws, wt, w0, s, t, sched)
        worst = max(worst, abs(total - 1.0))
    return [CheckResult("posterior_normalised", worst, tol, worst < tol)]


# ---------------------------------------------------------------------------
# Programs
# ---------------------------------------------------------------------------


def check_dijkstra(n_grids=100, seed=0):
    rng = make_rng(seed)
    bad = 0
    for k in range(n_grids):
        grid = GridSpec(3 + k % 2, connectivity=("eight", "four")[(k // 2) % 2])
        idx = rng.integers(0, len(grid.cost_table), size=grid.n_cells)
        got = path_cost(grid, idx, dijkstra_path(grid, idx), exact=True)
        bad += got != oracles.brute_force_shortest_path(grid, idx)
    return [CheckResult("dijkstra_optimal", float(bad), 0.0, bad == 0, f"{bad}/{n_grids} mismatches")]


def tnorm_log_wmc(probs, clauses):
    """``sum_c log(1 - prod_{l in c} (1 - p(l)))`` for factorised binary probs."""
    total = 0.0
    for clause in clauses:
        miss = 1.0
        for var, positive in clause:
            miss *= 1.0 - probs[var, 1 if positive else 0]
        total += math.log1p(-miss)
    return total


def cnf_gap(n_formulas=100, seed=0):
    """Largest gap between the enumerated all-satisfied log WMC at full masking
    and the probabilistic t-norm formula, over random 3-clause CNFs."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_formulas):
        prog = random_cnf(4, 3, rng)
        params, x = _tiny(rng, W=4, V=2)
        cache = forward_batch(params, x, np.full(4, MASK))
        y0 = np.ones((1, prog.output_dim), dtype=np.int64)
        enumerated = float(exact_log_wmc(cache, y0, prog).sum())
        worst = max(worst, abs(enumerated - tnorm_log_wmc(cache.probs[0], prog.clauses)))
    return worst


def check_cnf(n_formulas=20, tol=1e-9, seed=0):
    gap = cnf_gap(n_formulas, seed)
    return [CheckResult("cnf_tnorm", gap, tol, gap < tol)]


def check_checkpoint(seed=0, tmpdir=None):
    import os
    import tempfile

    rng = make_rng(seed)
    params, _ = _tiny(rng)
    with tempfile.TemporaryDirectory(dir=tmpdir) as d:
        path = os.path.join(d, "m.ckpt")
        save_checkpoint(path, params)
        back = load_checkpoint(path, params.arch)
    diff = float(np.abs(back.flat() - params.flat()).max())
    return [CheckResult("checkpoint_roundtrip", diff, 0.0, diff == 0.0)]


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def run_verify(level="fast", seed=0, estimators=None):
    """Run the check suite.  ``estimators`` may override ``"rloo"``."""
    if level not in ("fast", "full"):
        raise ValueError(f"unknown level {level!r}")
    est = dict(estimators or {})
    rloo = est.pop("rloo", rloo_dlogits)
    if est:
        raise ValueError(f"unknown estimator overrides {sorted(est)}")
    results = []
    results += check_gradients(n_models=2 if level == "fast" else 5, seed=seed)
    results += check_posterior(seed)
    results += check_cnf(20 if level == "fast" else 100, seed=seed)
    results += check_dijkstra(30 if level == "fast" else 200, seed=seed)
    results += check_checkpoint(seed)
    if level == "fast":
        results += check_rloo(seed=seed, estimator=rloo)
        results += check_snis(2000, 0.06, seed)
    else:
        results += check_rloo(n_rep=4000, S=8192, seed=seed, estimator=rloo)
        results += check_snis(10_000, 0.05, seed)
        results += check_samplers(seed=seed)
    return results


def format_report(results):
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        lines.append(f"{mark}  {r.name:<{width}}  measured={r.measured:.4g}  tol={r.tolerance:.4g}  {r.detail}".rstrip())
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} checks passed")
    return "\n".join(lines)


def write_report(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["name", "measured", "tolerance", "passed", "detail"])
        for r in results:
            w.writerow([r.name, repr(float(r.measured)), repr(float(r.tolerance)), int(r.passed), r.detail])
