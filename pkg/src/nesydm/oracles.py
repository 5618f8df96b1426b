"""Brute-force reference computations for small instances.

These enumerate explicitly and refuse (rather than approximate) when an
instance is too large.  Distributions are returned as dicts keyed by tuples
in lexicographic order.
"""

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.special import beta as beta_fn

from nesydm.diffusion import MASK
from nesydm.model import GradientBundle, backward_logits, forward, forward_batch


class BudgetExceeded(ValueError):
    pass


@dataclass(frozen=True)
class EnumerationBudget:
    max_states: int = 200_000
    max_trajectories: int = 1_000_000

    def __post_init__(self):
        if self.max_states <= 0 or self.max_trajectories <= 0:
            raise ValueError("budgets must be positive")


DEFAULT_BUDGET = EnumerationBudget()


def _sequences(W, V, budget):
    if V**W > budget.max_states:
        raise BudgetExceeded(f"{V}^{W} sequences exceed the budget of {budget.max_states}")
    return list(itertools.product(range(V), repeat=W))


def _seq_prob(probs, seq):
    p = 1.0
    for i, v in enumerate(seq):
        p *= probs[i, v]
    return p


# ---------------------------------------------------------------------------
# Weighted model counts and output-loss gradients
# ---------------------------------------------------------------------------


def exact_wmc_dim(probs, prog, y0, i, budget=DEFAULT_BUDGET):
    """``sum_w prod_j probs[j, w_j] * [prog(w)_i == y0_i]``."""
    probs = np.asarray(probs, dtype=np.float64)
    W, V = probs.shape
    total = 0.0
    for seq in _sequences(W, V, budget):
        if prog.eval(np.array(seq))[i] == y0[i]:
            total += _seq_prob(probs, seq)
    return total


def exact_output_value(params, x, wt, y0, prog, t, sched, budget=DEFAULT_BUDGET):
    """``alpha'_t * sum_i log WMC_i`` for one example."""
    probs = forward(params, x, wt).probs
    logs = [math.log(exact_wmc_dim(probs, prog, y0, i, budget)) for i in range(prog.output_dim)]
    return float(sched.alpha_prime(t)) * math.fsum(logs)


def exact_output_grad(params, x, wt, y0, prog, t, sched, budget=DEFAULT_BUDGET):
    """Exact gradient of :func:`exact_output_value` by enumeration."""
    cache = forward_batch(params, x, wt)
    probs = cache.probs[0]
    W, V = probs.shape
    seqs = _sequences(W, V, budget)
    outs = [prog.eval(np.array(s)) for s in seqs]
    weights = [_seq_prob(probs, s) for s in seqs]
    wmc = [sum(wt_ for wt_, o in zip(weights, outs) if o[i] == y0[i]) for i in range(prog.output_dim)]
    dl = np.zeros((W, V))
    ap = float(sched.alpha_prime(t))
    for seq, o, p in zip(seqs, outs, weights):
        c = ap * p * sum(1.0 / wmc[i] for i in range(prog.output_dim) if o[i] == y0[i])
        if c == 0.0:
            continue
        for j, v in enumerate(seq):
            dl[j, v] += c
        dl -= c * probs
    return backward_logits(params, cache, dl[None])


# ---------------------------------------------------------------------------
# Exact distributions
# ---------------------------------------------------------------------------


def _row_probs(params, x, wt):
    return forward(params, x, np.array(wt, dtype=np.int64)).probs


def exact_reverse_distribution(params, x, sched=None, budget=DEFAULT_BUDGET):
    """Law of the exact reverse process started fully masked.

    Unmasking one uniformly chosen masked dimension at a time, summed over
    all orders and values.  ``sched`` is accepted for symmetry; the law does
    not depend on it because the model ignores time.
    """
    W, V = params.arch.concept_dim, params.arch.vocab
    if W > 4 or V > 4:
        raise BudgetExceeded("exact reverse distribution supports W <= 4 and V <= 4")
    frontier = {(MASK,) * W: 1.0}
    for k in range(W, 0, -1):
        nxt = {}
        for state, mass in frontier.items():
            probs = _row_probs(params, x, state)
            for i in (j for j in range(W) if state[j] == MASK):
                for v in range(V):
                    p = mass * probs[i, v] / k
                    if p == 0.0:
                        continue
                    s = state[:i] + (v,) + state[i + 1 :]
                    nxt[s] = nxt.get(s, 0.0) + p
        frontier = nxt
    return dict(sorted(frontier.items()))


def exact_tstep_distribution(params, x, T, sched, budget=DEFAULT_BUDGET):
    """Law of the ``T``-step time-discretised sampler."""
    W, V = params.arch.concept_dim, params.arch.vocab
    if V**W > budget.max_states:
        raise BudgetExceeded("too many states")
    frontier = {(MASK,) * W: 1.0}
    for k in range(T, 0, -1):
        t, s = k / T, (k - 1) / T
        keep_masked = (1.0 - float(sched.alpha(s))) / (1.0 - float(sched.alpha(t)))
        nxt = {}
        for state, mass in frontier.items():
            probs = _row_probs(params, x, state)
            masked = [j for j in range(W) if state[j] == MASK]
            for vals in itertools.product(range(V), repeat=len(masked)):
                pv = mass
                for j, v in zip(masked, vals):
                    pv *= probs[j, v]
                if pv == 0.0:
                    continue
                for reveal in itertools.product((False, True), repeat=len(masked)):
                    pr = pv
                    new = list(state)
                    for j, v, r in zip(masked, vals, reveal):
                        pr *= (1.0 - keep_masked) if r else keep_masked
                        if r:
                            new[j] = v
                    if pr == 0.0:
                        continue
                    key = tuple(new)
                    nxt[key] = nxt.get(key, 0.0) + pr
        frontier = nxt
    return dict(sorted(frontier.items()))


def exact_conditional(probs, prog, y0, budget=DEFAULT_BUDGET):
    """Factorised ``probs`` restricted to ``{w : prog(w) = y0}`` and renormalised."""
    probs = np.asarray(probs, dtype=np.float64)
    W, V = probs.shape
    y0 = np.asarray(y0)
    mass = {}
    for seq in _sequences(W, V, budget):
        if np.array_equal(prog.eval(np.array(seq)), y0):
            mass[seq] = _seq_prob(probs, seq)
    z = math.fsum(mass.values())
    if not mass or z == 0.0:
        raise ValueError("no concept sequence consistent with y0 has positive probability")
    return {k: v / z for k, v in mass.items()}


def entropy(dist):
    return -math.fsum(p * math.log(p) for p in dist.values() if p > 0)


def total_variation(p, q):
    keys = set(p) | set(q)
    return 0.5 * math.fsum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def empirical(samples):
    samples = np.asarray(samples)
    rows, counts = np.unique(samples.reshape(-1, samples.shape[-1]), axis=0, return_counts=True)
    n = counts.sum()
    return {tuple(int(v) for v in r): c / n for r, c in zip(rows, counts)}


# ---------------------------------------------------------------------------
# Likelihoods and NELBOs
# ---------------------------------------------------------------------------


def exact_nesydm_nll(params, x, y0, prog):
    """``-log p(y0 | x)`` of the continuous-time model over concepts and outputs.

    All ``W + Y`` dimensions are revealed in a uniformly random order.  A
    concept dimension is drawn from the unmasking model; an output dimension
    agrees with ``y0`` with probability equal to its weighted model count under
    the current partial concepts.
    """
    W, Y = params.arch.concept_dim, prog.output_dim
    y0 = np.asarray(y0)
    memo = {}

    def wmc(state, i):
        probs = _row_probs(params, x, state)
        return exact_wmc_dim(probs, prog, y0, i)

    def rec(state, ydone):
        key = (state, ydone)
        if key in memo:
            return memo[key]
        w_masked = [j for j in range(W) if state[j] == MASK]
        y_masked = [i for i in range(Y) if not ydone[i]]
        k = len(w_masked) + len(y_masked)
        if k == 0:
            return 1.0
        total = 0.0
        if w_masked:
            probs = _row_probs(params, x, state)
            for j in w_masked:
                for v in range(params.arch.vocab):
                    if probs[j, v] > 0:
                        total += probs[j, v] * rec(state[:j] + (v,) + state[j + 1 :], ydone)
        for i in y_masked:
            total += wmc(state, i) * rec(state, ydone[:i] + (True,) + ydone[i + 1 :])
        memo[key] = total / k
        return memo[key]

    return -math.log(rec((MASK,) * W, (False,) * Y))


def _mask_patterns(W):
    return list(itertools.product((False, True), repeat=W))


def exact_mdm_nelbo_continuous(params, x, w0):
    """Continuous-time concept NELBO of ``w0`` for the linear schedule.

    Integrating ``t`` out gives a Beta-function weight per mask pattern.
    """
    w0 = tuple(int(v) for v in w0)
    W = len(w0)
    total = 0.0
    for pattern in _mask_patterns(W):
        m = sum(pattern)
        if m == 0:
            continue
        wt = tuple(MASK if pm else v for pm, v in zip(pattern, w0))
        probs = _row_probs(params, x, wt)
        nll = -sum(math.log(probs[i, w0[i]]) for i in range(W) if pattern[i])
        total += beta_fn(m, W - m + 1) * nll
    return total


def exact_mdm_nelbo_discrete(params, x, w0, T, sched):
    """``T``-step discrete-time concept NELBO of ``w0`` by enumerating masks."""
    w0 = tuple(int(v) for v in w0)
    W = len(w0)

    def wt_of(pattern):
        return tuple(MASK if pm else v for pm, v in zip(pattern, w0))

    def q_mask(pattern, t):
        a = float(sched.alpha(t))
        return math.prod((1.0 - a) if pm else a for pm in pattern)

    total = 0.0
    t1 = 1.0 / T
    for pattern in _mask_patterns(W):
        q = q_mask(pattern, t1)
        if q == 0.0 or not any(pattern):
            continue
        probs = _row_probs(params, x, wt_of(pattern))
        total += q * -sum(math.log(probs[i, w0[i]]) for i in range(W) if pattern[i])
    for k in range(2, T + 1):
        t, s = k / T, (k - 1) / T
        a_t, a_s = float(sched.alpha(t)), float(sched.alpha(s))
        p_unmask = (a_s - a_t) / (1.0 - a_t)
        for pt in _mask_patterns(W):
            qt = q_mask(pt, t)
            if qt == 0.0 or not any(pt):
                continue
            probs = _row_probs(params, x, wt_of(pt))
            masked = [i for i in range(W) if pt[i]]
            for reveal in itertools.product((False, True), repeat=len(masked)):
                qs = math.prod(p_unmask if r else 1.0 - p_unmask for r in reveal)
                if qs == 0.0:
                    continue
                nll = -sum(math.log(probs[i, w0[i]]) for i, r in zip(masked, reveal) if r)
                total += qt * qs * nll
    return total


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_difference(params, fn, eps=1e-5):
    """Central differences of scalar ``fn(params)`` per coordinate."""
    flat = params.flat()
    grad = np.zeros_like(flat)
    for j in range(flat.size):
        vals = []
        for sign in (1.0, -1.0):
            pert = flat.copy()
            pert[j] += sign * eps
            v = fn(params.replace(params.unflatten(pert)))
            if not np.isfinite(v):
                raise FloatingPointError(f"non-finite evaluation at coordinate {j}")
            vals.append(v)
        grad[j] = (vals[0] - vals[1]) / (2.0 * eps)
    return GradientBundle(params.unflatten(grad))


# ---------------------------------------------------------------------------
# Shortest paths
# ---------------------------------------------------------------------------


def brute_force_shortest_path(grid, cost_indices):
    """Minimal corner-to-corner path cost by exhaustive simple-path search.

    Costs are summed exactly (as a :class:`~fractions.Fraction`).
    """
    n = grid.side
    if n > 4:
        raise BudgetExceeded("exhaustive path search supports grids up to 4x4")
    table = grid.exact_costs()
    denom = math.lcm(*(c.denominator for c in table))
    costs = [int(table[int(i)] * denom) for i in np.asarray(cost_indices).ravel()]
    if grid.connectivity == "eight":
        moves = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
    else:
        moves = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    target = n * n - 1
    best = [math.inf]
    visited = [False] * (n * n)

    def dfs(u, acc):
        if acc >= best[0]:
            return
        if u == target:
            best[0] = acc
            return
        ui, uj = divmod(u, n)
        for di, dj in moves:
            vi, vj = ui + di, uj + dj
            if 0 <= vi < n and 0 <= vj < n:
                v = vi * n + vj
                if not visited[v]:
                    visited[v] = True
                    dfs(v, acc + costs[v])
                    visited[v] = False

    visited[0] = True
    dfs(0, costs[0])
    return Fraction(best[0], denom)
