from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nesydm.diffusion import MASK, make_rng
from nesydm.oracles import brute_force_shortest_path
from nesydm.programs import (
    AdditionProgram,
    CNFProgram,
    GridSpec,
    ShortestPathProgram,
    XorProgram,
    dijkstra_path,
    path_cost,
    random_cnf,
)


def test_xor():
    prog = XorProgram()
    np.testing.assert_array_equal(prog.eval([[0, 0], [0, 1], [1, 0], [1, 1]]), [[0], [1], [1], [0]])
    multi = XorProgram(pairs=((0, 1), (1, 2)))
    np.testing.assert_array_equal(multi.eval([1, 0, 0]), [1, 0])


def test_addition_examples():
    one = AdditionProgram(1)
    np.testing.assert_array_equal(one.eval([9, 9]), [1, 8])
    np.testing.assert_array_equal(one.eval([3, 4]), [0, 7])
    two = AdditionProgram(2)
    np.testing.assert_array_equal(two.eval([4, 7, 5, 8]), [1, 0, 5])


@settings(max_examples=100)
@given(st.integers(1, 3), st.data())
def test_addition_matches_integer_sum(n, data):
    a = data.draw(st.integers(0, 10**n - 1))
    b = data.draw(st.integers(0, 10**n - 1))
    digits = [int(d) for d in f"{a:0{n}d}{b:0{n}d}"]
    out = AdditionProgram(n).eval(digits)
    assert int("".join(map(str, out))) == a + b


def test_program_input_checks():
    with pytest.raises(ValueError):
        XorProgram().eval([0, 1, 1])
    with pytest.raises(ValueError):
        XorProgram().eval([0, MASK])
    with pytest.raises(ValueError):
        AdditionProgram(1).eval([10, 0])


def test_batch_shapes():
    out = AdditionProgram(1).eval(np.zeros((3, 4, 2), dtype=int))
    assert out.shape == (3, 4, 2)


def test_carryover_keeps_unmasked_outputs():
    prog = XorProgram()
    np.testing.assert_array_equal(prog.eval_carryover([[0, 1]], [[0]]), [[0]])
    np.testing.assert_array_equal(prog.eval_carryover([[0, 1]], [[MASK]]), [[1]])


def test_all_sequences_lexicographic():
    seqs = AdditionProgram(1).all_sequences()
    assert seqs.shape == (100, 2)
    assert [tuple(s) for s in seqs] == sorted(tuple(s) for s in seqs)


def test_cnf_eval():
    prog = CNFProgram([[(0, True), (1, False)], [(2, True)]], 3)
    np.testing.assert_array_equal(prog.eval([[0, 1, 1], [0, 0, 0], [1, 1, 0]]), [[0, 1], [1, 0], [1, 0]])
    with pytest.raises(ValueError):
        CNFProgram([[(5, True)]], 3)
    with pytest.raises(ValueError):
        CNFProgram([[]], 3)


def test_random_cnf_shape(rng):
    prog = random_cnf(4, 3, rng)
    assert prog.output_dim == 3 and prog.concept_dim == 4
    assert all(1 <= len(c) <= 3 for c in prog.clauses)


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec(1)
    with pytest.raises(ValueError):
        GridSpec(3, cost_table=(1.0, 1.0))
    with pytest.raises(ValueError):
        GridSpec(3, connectivity="six")
    assert GridSpec(3).exact_costs()[0] == Fraction(4, 5)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), side=st.integers(2, 4), eight=st.booleans())
def test_dijkstra_is_optimal(seed, side, eight):
    grid = GridSpec(side, connectivity="eight" if eight else "four")
    idx = make_rng(seed).integers(0, 5, size=grid.n_cells)
    path = dijkstra_path(grid, idx)
    assert path[0] == 1 and path[-1] == 1
    assert path_cost(grid, idx, path, exact=True) == brute_force_shortest_path(grid, idx)


def test_dijkstra_avoids_expensive_cells():
    grid = GridSpec(3, connectivity="four")
    idx = np.array([0, 0, 0, 4, 4, 0, 4, 4, 0])
    np.testing.assert_array_equal(dijkstra_path(grid, idx), [1, 1, 1, 0, 0, 1, 0, 0, 1])


def test_dijkstra_deterministic_ties():
    grid = GridSpec(3, connectivity="four")
    idx = np.zeros(9, dtype=int)
    a = dijkstra_path(grid, idx)
    assert np.array_equal(a, dijkstra_path(grid, idx)) and a.sum() == 5


def test_path_cost_exact_sum():
    grid = GridSpec(2)
    idx = np.array([0, 1, 2, 0])
    assert path_cost(grid, idx, np.array([1, 1, 0, 1]), exact=True) == Fraction(28, 10)
    assert path_cost(grid, idx, np.array([1, 1, 0, 1])) == pytest.approx(2.8)


def test_shortest_path_program_batches():
    prog = ShortestPathProgram(GridSpec(3))
    w = make_rng(0).integers(0, 5, size=(4, 9))
    out = prog.eval(w)
    assert out.shape == (4, 9)
    np.testing.assert_array_equal(out[2], dijkstra_path(prog.grid, w[2]))
