"""Symbolic programs mapping concept vectors to output vectors.

A program maps ``[V_c]^W -> [V_y]^Y``.  ``eval`` works on a single sequence or
a batch ``(..., W)`` and returns ``(..., Y)``.  Concepts and outputs are
0-based integers.
"""

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from nesydm.diffusion import MASK
from nesydm.kernels import dijkstra_batch

PATH_COSTS = (0.8, 1.2, 5.3, 7.7, 9.2)


class Program:
    """Base class; subclasses implement :meth:`_eval` on a ``(n, W)`` batch."""

    concept_dim: int
    concept_vocab: int
    output_dim: int
    output_vocab: int

    def _eval(self, w):
        raise NotImplementedError

    def _check(self, w):
        w = np.asarray(w, dtype=np.int64)
        if w.shape[-1:] != (self.concept_dim,):
            raise ValueError(f"expected concept sequences of length {self.concept_dim}, got shape {w.shape}")
        if (w < 0).any() or (w >= self.concept_vocab).any():
            raise ValueError(f"concepts must be unmasked and in [0, {self.concept_vocab})")
        return w

    def eval(self, w):
        w = self._check(w)
        lead = w.shape[:-1]
        out = self._eval(w.reshape(-1, self.concept_dim))
        return out.reshape(lead + (self.output_dim,))

    def eval_dim(self, w, i):
        return self.eval(w)[..., i]

    def eval_carryover(self, w, yt):
        """Output dims already unmasked in ``yt`` are returned unchanged."""
        y = self.eval(w)
        yt = np.asarray(yt, dtype=np.int64)
        if yt.shape[-1:] != (self.output_dim,):
            raise ValueError(f"yt must have length {self.output_dim}")
        return np.where(yt == MASK, y, yt)

    def all_sequences(self):
        """Every concept sequence in lexicographic order, shape ``(V_c^W, W)``."""
        grids = np.indices((self.concept_vocab,) * self.concept_dim)
        return grids.reshape(self.concept_dim, -1).T.copy()


class XorProgram(Program):
    """Each output is the XOR of a pair of binary concepts."""

    def __init__(self, pairs=((0, 1),), concept_dim=None):
        self.pairs = tuple((int(a), int(b)) for a, b in pairs)
        if not self.pairs:
            raise ValueError("need at least one pair")
        self.concept_dim = concept_dim or 1 + max(max(p) for p in self.pairs)
        self.concept_vocab = 2
        self.output_dim = len(self.pairs)
        self.output_vocab = 2
        if any(min(p) < 0 or max(p) >= self.concept_dim for p in self.pairs):
            raise ValueError("pair index out of range")

    def _eval(self, w):
        a = np.array([p[0] for p in self.pairs])
        b = np.array([p[1] for p in self.pairs])
        return (w[:, a] != w[:, b]).astype(np.int64)


class AdditionProgram(Program):
    """Sum of two N-digit numbers (most-significant digit first).

    Concepts are the 2N digits; the output is the N+1 digits of the sum,
    most-significant first, zero padded.
    """

    def __init__(self, n_digits=1):
        if n_digits < 1:
            raise ValueError("n_digits must be positive")
        self.n_digits = n_digits
        self.concept_dim = 2 * n_digits
        self.concept_vocab = 10
        self.output_dim = n_digits + 1
        self.output_vocab = 10

    def _eval(self, w):
        n = self.n_digits
        place = 10 ** np.arange(n - 1, -1, -1)
        total = w[:, :n] @ place + w[:, n:] @ place
        out_place = 10 ** np.arange(n, -1, -1)
        return (total[:, None] // out_place[None, :]) % 10


@dataclass(frozen=True)
class GridSpec:
    side: int
    cost_table: tuple = PATH_COSTS
    connectivity: str = "eight"

    def __post_init__(self):
        if self.side < 2:
            raise ValueError("grid side must be at least 2")
        costs = np.asarray(self.cost_table, dtype=np.float64)
        if costs.ndim != 1 or (costs <= 0).any() or (np.diff(costs) <= 0).any():
            raise ValueError("cost_table must be strictly positive and strictly increasing")
        if self.connectivity not in ("four", "eight"):
            raise ValueError(f"unknown connectivity {self.connectivity!r}")
        object.__setattr__(self, "cost_table", tuple(float(c) for c in costs))

    @property
    def n_cells(self):
        return self.side * self.side

    def cell_costs(self, cost_indices):
        return np.asarray(self.cost_table)[np.asarray(cost_indices, dtype=np.int64)]

    def exact_costs(self):
        """Cost table as exact fractions of the shortest decimal representation."""
        return tuple(Fraction(repr(c)) for c in self.cost_table)


def dijkstra_path(grid, cost_indices):
    """Binary mask (length ``side**2``) of a cheapest corner-to-corner path."""
    idx = np.asarray(cost_indices, dtype=np.int64)
    if (idx == MASK).any():
        raise ValueError("cost indices must be fully unmasked")
    single = idx.ndim == 1
    idx = idx.reshape(-1, grid.n_cells)
    paths = dijkstra_batch(grid.cell_costs(idx), grid.side, grid.connectivity == "eight")
    return paths[0] if single else paths


def path_cost(grid, cost_indices, path, exact=False):
    """Total cost of the cells marked in ``path``.

    With ``exact`` the sum is a :class:`~fractions.Fraction` of the decimal
    costs, so equal-cost paths compare equal regardless of summation order.
    """
    idx = np.asarray(cost_indices, dtype=np.int64)
    path = np.asarray(path, dtype=bool)
    if idx.ndim > 1:
        return [path_cost(grid, i, p, exact) for i, p in zip(idx, path)]
    if exact:
        table = grid.exact_costs()
        return sum((table[i] for i in idx[path]), Fraction(0))
    return math.fsum(grid.cell_costs(idx[path]))


class ShortestPathProgram(Program):
    """Cell cost indices (``0..4``) to the binary mask of a shortest path."""

    def __init__(self, grid):
        self.grid = grid
        self.concept_dim = grid.n_cells
        self.concept_vocab = len(grid.cost_table)
        self.output_dim = grid.n_cells
        self.output_vocab = 2

    def _eval(self, w):
        return dijkstra_path(self.grid, w).astype(np.int64)


class CNFProgram(Program):
    """Each output dimension is one disjunctive clause over binary concepts.

    ``clauses`` is a sequence of clauses; a clause is a sequence of
    ``(variable, positive)`` literals.  Output ``i`` is 1 iff clause ``i`` holds.
    """

    def __init__(self, clauses, n_vars):
        self.clauses = tuple(tuple((int(v), bool(s)) for v, s in c) for c in clauses)
        if any(not c for c in self.clauses):
            raise ValueError("empty clause")
        if any(not 0 <= v < n_vars for c in self.clauses for v, _ in c):
            raise ValueError("literal variable out of range")
        self.n_vars = n_vars
        self.concept_dim = n_vars
        self.concept_vocab = 2
        self.output_dim = len(self.clauses)
        self.output_vocab = 2

    def _eval(self, w):
        out = np.zeros((w.shape[0], self.output_dim), dtype=np.int64)
        for i, clause in enumerate(self.clauses):
            sat = np.zeros(w.shape[0], dtype=bool)
            for v, positive in clause:
                sat |= (w[:, v] == 1) if positive else (w[:, v] == 0)
            out[:, i] = sat
        return out


def random_cnf(n_vars, n_clauses, rng, max_len=3):
    clauses = []
    for _ in range(n_clauses):
        k = int(rng.integers(1, max_len + 1))
        vars_ = rng.choice(n_vars, size=min(k, n_vars), replace=False)
        clauses.append([(int(v), bool(rng.integers(2))) for v in vars_])
    return CNFProgram(tuple(clauses), n_vars)
