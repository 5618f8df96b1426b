"""Inner-loop kernels with a numba path and a vectorised numpy path.

The public names (``dijkstra_batch``, ``categorical_sample``,
``weighted_onehot_sum``) dispatch on :data:`nesydm._accel.USE_NUMBA`.  Both
implementations consume the same uniforms / inputs and return identical
results; ``tests/test_kernels.py`` checks parity and
``benchmarks/bench_kernels.py`` times them against each other.
"""

import numpy as np

from nesydm._accel import USE_NUMBA, njit

# Neighbour offsets, four-connected first so that slicing [:4] gives them.
_MOVES = np.array(
    [(-1, 0), (0, -1), (0, 1), (1, 0), (-1, -1), (-1, 1), (1, -1), (1, 1)],
    dtype=np.int64,
)


# ---------------------------------------------------------------------------
# Dijkstra over node-weighted grids
# ---------------------------------------------------------------------------


@njit
def _dijkstra_batch_numba(cell_costs, side, n_moves, moves):
    n, nn = cell_costs.shape
    paths = np.zeros((n, nn), dtype=np.int8)
    dist = np.empty(nn)
    pred = np.empty(nn, dtype=np.int64)
    done = np.empty(nn, dtype=np.bool_)
    target = nn - 1
    for b in range(n):
        c = cell_costs[b]
        for v in range(nn):
            dist[v] = np.inf
            pred[v] = -1
            done[v] = False
        dist[0] = c[0]
        for _ in range(nn):
            u = -1
            best = np.inf
            for v in range(nn):
                if not done[v] and dist[v] < best:
                    best = dist[v]
                    u = v
            if u < 0:
                break
            done[u] = True
            if u == target:
                break
            ui = u // side
            uj = u - ui * side
            for m in range(n_moves):
                vi = ui + moves[m, 0]
                vj = uj + moves[m, 1]
                if vi < 0 or vi >= side or vj < 0 or vj >= side:
                    continue
                v = vi * side + vj
                if done[v]:
                    continue
                nd = dist[u] + c[v]
                if nd < dist[v] or (nd == dist[v] and u < pred[v]):
                    dist[v] = nd
                    pred[v] = u
        v = target
        while v >= 0:
            paths[b, v] = 1
            v = pred[v]
    return paths


def _dijkstra_batch_numpy(cell_costs, side, n_moves, moves):
    n, nn = cell_costs.shape
    rows = np.arange(n)
    dist = np.full((n, nn), np.inf)
    dist[:, 0] = cell_costs[:, 0]
    pred = np.full((n, nn), -1, dtype=np.int64)
    done = np.zeros((n, nn), dtype=bool)
    for _ in range(nn):
        u = np.where(done, np.inf, dist).argmin(axis=1)
        done[rows, u] = True
        ui, uj = np.divmod(u, side)
        du = dist[rows, u]
        for m in range(n_moves):
            vi = ui + moves[m, 0]
            vj = uj + moves[m, 1]
            ok = (vi >= 0) & (vi < side) & (vj >= 0) & (vj < side)
            v = np.where(ok, vi * side + vj, 0)
            ok &= ~done[rows, v]
            nd = du + cell_costs[rows, v]
            dv = dist[rows, v]
            better = ok & ((nd < dv) | ((nd == dv) & (u < pred[rows, v])))
            r = rows[better]
            dist[r, v[better]] = nd[better]
            pred[r, v[better]] = u[better]
    paths = np.zeros((n, nn), dtype=np.int8)
    cur = np.full(n, nn - 1)
    alive = np.ones(n, dtype=bool)
    while alive.any():
        paths[rows[alive], cur[alive]] = 1
        cur = np.where(alive, pred[rows, cur], -1)
        alive = cur >= 0
    return paths


def dijkstra_batch(cell_costs, side, eight=True, use_numba=None):
    """Shortest corner-to-corner paths for a batch of node-weighted grids.

    ``cell_costs`` has shape ``(n, side*side)`` (row-major cells).  Entering a
    cell pays its cost, the start cell included.  Returns an ``int8`` array of
    the same shape marking the cells on the path.
    """
    cell_costs = np.ascontiguousarray(cell_costs, dtype=np.float64)
    if cell_costs.ndim != 2 or cell_costs.shape[1] != side * side:
        raise ValueError(f"expected shape (n, {side * side}), got {cell_costs.shape}")
    n_moves = 8 if eight else 4
    if USE_NUMBA if use_numba is None else use_numba:
        return _dijkstra_batch_numba(cell_costs, side, n_moves, _MOVES)
    return _dijkstra_batch_numpy(cell_costs, side, n_moves, _MOVES)


# ---------------------------------------------------------------------------
# Inverse-CDF categorical sampling
# ---------------------------------------------------------------------------


@njit
def _categorical_numba(probs, u):
    rows, v = probs.shape
    out = np.empty(rows, dtype=np.int64)
    for r in range(rows):
        acc = 0.0
        k = 0
        while k < v - 1:
            acc += probs[r, k]
            if u[r] < acc:
                break
            k += 1
        # skip trailing zero-probability categories left by rounding
        while k > 0 and probs[r, k] == 0.0:
            k -= 1
        out[r] = k
    return out


def _categorical_numpy(probs, u):
    cdf = np.cumsum(probs, axis=1)
    k = np.minimum((cdf <= u[:, None]).sum(axis=1), probs.shape[1] - 1)
    # same trailing-zero rule as the loop version
    rows = np.arange(probs.shape[0])
    bad = probs[rows, k] == 0.0
    while bad.any():
        k[bad] -= 1
        bad = (k > 0) & (probs[rows, k] == 0.0)
    return k


def categorical_sample(probs, u, use_numba=None):
    """Draw one index per row of ``probs`` (..., V) using uniforms ``u`` (...)."""
    probs = np.asarray(probs, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    lead = probs.shape[:-1]
    if u.shape != lead:
        raise ValueError(f"uniforms shape {u.shape} does not match {lead}")
    flat_p = np.ascontiguousarray(probs.reshape(-1, probs.shape[-1]))
    flat_u = np.ascontiguousarray(u.reshape(-1))
    if USE_NUMBA if use_numba is None else use_numba:
        out = _categorical_numba(flat_p, flat_u)
    else:
        out = _categorical_numpy(flat_p, flat_u)
    return out.reshape(lead)


# ---------------------------------------------------------------------------
# Weighted one-hot accumulation
# ---------------------------------------------------------------------------


@njit
def _weighted_onehot_numba(samples, coef, vocab):
    b, s, w = samples.shape
    out = np.zeros((b, w, vocab))
    for i in range(b):
        for j in range(s):
            c = coef[i, j]
            if c == 0.0:
                continue
            for d in range(w):
                out[i, d, samples[i, j, d]] += c
    return out


def _weighted_onehot_numpy(samples, coef, vocab):
    b, s, w = samples.shape
    flat = (np.arange(b)[:, None, None] * w + np.arange(w)[None, None, :]) * vocab + samples
    weights = np.broadcast_to(coef[:, :, None], samples.shape)
    out = np.bincount(flat.ravel(), weights=weights.ravel(), minlength=b * w * vocab)
    return out.reshape(b, w, vocab)


def weighted_onehot_sum(samples, coef, vocab, use_numba=None):
    """``out[b, d, v] = sum_j coef[b, j] * [samples[b, j, d] == v]``."""
    samples = np.ascontiguousarray(samples, dtype=np.int64)
    coef = np.ascontiguousarray(coef, dtype=np.float64)
    if USE_NUMBA if use_numba is None else use_numba:
        return _weighted_onehot_numba(samples, coef, vocab)
    return _weighted_onehot_numpy(samples, coef, vocab)
