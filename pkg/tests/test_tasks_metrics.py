import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nesydm.diffusion import make_rng
from nesydm.metrics import concept_accuracy, ece, exact_match_accuracy, is_valid_path, path_cost_accuracy
from nesydm.programs import AdditionProgram, GridSpec, dijkstra_path
from nesydm.tasks import (
    DATA_ENV,
    Dataset,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    load_idx_pair,
    load_mnist,
    make_addition_task,
    make_path_task,
    make_xor_task,
    mnist_paths,
    program_for,
    write_idx,
)


def _fake_mnist(tmp_path, n=20):
    rng = make_rng(0)
    images = rng.integers(0, 256, size=(n, 28, 28)).astype(np.uint8)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte", images)
    write_idx(tmp_path / "train-labels-idx1-ubyte", labels)
    return images, labels


def test_idx_roundtrip(tmp_path):
    images, labels = _fake_mnist(tmp_path)
    x, y = load_idx_pair(*mnist_paths("train", str(tmp_path)))
    np.testing.assert_allclose(x, images / 255.0)
    np.testing.assert_array_equal(y, labels)
    assert x.min() >= 0 and x.max() <= 1


def test_data_dir_from_environment(tmp_path, monkeypatch):
    _fake_mnist(tmp_path, n=6)
    monkeypatch.setenv(DATA_ENV, str(tmp_path))
    x, y = load_mnist("train")
    assert len(x) == 6


def test_idx_errors(tmp_path):
    _fake_mnist(tmp_path)
    img, lab = mnist_paths("train", str(tmp_path))
    raw = open(img, "rb").read()
    bad = tmp_path / "bad"
    bad.write_bytes(b"\x00\x00\x08\x01" + raw[4:])
    with pytest.raises(IdxMagicError):
        load_idx_pair(bad, lab)
    bad.write_bytes(raw[:-10])
    with pytest.raises(IdxTruncatedError):
        load_idx_pair(bad, lab)
    bad.write_bytes(raw[:2])
    with pytest.raises(IdxTruncatedError):
        load_idx_pair(bad, lab)
    write_idx(tmp_path / "few", np.zeros(3, dtype=np.uint8))
    with pytest.raises(IdxCountMismatchError):
        load_idx_pair(img, tmp_path / "few")


def test_addition_task_uses_each_digit_once():
    labels = np.arange(40) % 10
    images = np.arange(40, dtype=float)[:, None] * np.ones((1, 3))
    data = make_addition_task(images, labels, 2, make_rng(0))
    assert len(data) == 10
    used = data.x.reshape(10, 4, 3)[:, :, 0].ravel()
    assert sorted(used.tolist()) == list(range(40))
    np.testing.assert_array_equal(data.y0, AdditionProgram(2).eval(data.w_true))
    with pytest.raises(ValueError):
        make_addition_task(images[:3], labels[:3], 2, make_rng(0))


def test_xor_task():
    data = make_xor_task(100, 0.1, make_rng(0))
    assert data.x.shape == (100, 4)
    np.testing.assert_array_equal(data.y0[:, 0], data.w_true[:, 0] ^ data.w_true[:, 1])


def test_path_task_labels_are_shortest_paths():
    grid = GridSpec(3)
    data = make_path_task(grid, 10, 0.5, make_rng(0), patch=2)
    assert data.x.shape == (10, 9 * 4 * 5)
    np.testing.assert_array_equal(data.y0, dijkstra_path(grid, data.w_true))


def test_path_features_encode_costs():
    grid = GridSpec(3)
    data = make_path_task(grid, 5, 0.0, make_rng(0), patch=1)
    np.testing.assert_array_equal(data.x.reshape(5, 9, 5).argmax(-1), data.w_true)


def test_dataset_cache_roundtrip(tmp_path):
    data = make_xor_task(10, 0.1, make_rng(0))
    path = tmp_path / "d.npz"
    data.save(path)
    back = Dataset.load(path)
    np.testing.assert_array_equal(back.x, data.x)
    assert back.meta["task"] == "xor"
    np.savez(tmp_path / "old.npz", x=data.x, y0=data.y0)
    with pytest.raises(ValueError, match="version"):
        Dataset.load(tmp_path / "old.npz")


def test_dataset_length_check():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros((2, 1)))


def test_program_for():
    assert program_for("addition", n_digits=2).concept_dim == 4
    assert program_for("path", side=3).concept_dim == 9
    with pytest.raises(ValueError):
        program_for("sudoku")


def test_accuracies():
    assert exact_match_accuracy([[1, 2], [3, 4]], [[1, 2], [3, 5]]) == 0.5
    assert concept_accuracy([[1, 2], [3, 4]], [[1, 2], [3, 5]]) == 0.75
    with pytest.raises(ValueError):
        exact_match_accuracy([[1]], [[1, 2]])


def test_is_valid_path():
    grid = GridSpec(3)
    assert is_valid_path(grid, [1, 0, 0, 0, 1, 0, 0, 0, 1])
    assert not is_valid_path(GridSpec(3, connectivity="four"), [1, 0, 0, 0, 1, 0, 0, 0, 1])
    assert not is_valid_path(grid, [1, 0, 0, 0, 0, 0, 0, 0, 1])


def test_path_cost_accuracy_accepts_equal_cost_alternatives():
    grid = GridSpec(2, connectivity="four")
    idx = np.array([[0, 0, 0, 0]])
    assert path_cost_accuracy(grid, np.array([[1, 0, 1, 1]]), idx) == 1.0
    assert path_cost_accuracy(grid, np.array([[1, 1, 1, 1]]), idx) == 0.0
    assert path_cost_accuracy(grid, np.array([[1, 0, 0, 1]]), idx) == 0.0


def test_ece_examples():
    assert ece(np.array([[1.0, 0.0]] * 10), np.zeros(10, int)) == 0.0
    assert ece(np.array([[0.0, 1.0]] * 10), np.zeros(10, int)) == 1.0
    with pytest.raises(ValueError):
        ece(np.array([[0.5, 0.5]]), np.zeros(2, int))
    with pytest.raises(ValueError):
        ece(np.array([[0.5, 0.5]]), np.zeros(1, int), bins=1)


@settings(max_examples=50)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 50))
def test_ece_order_invariant_and_bounded(seed, n):
    rng = make_rng(seed)
    m = rng.random((n, 3))
    m /= m.sum(-1, keepdims=True)
    t = rng.integers(0, 3, n)
    perm = rng.permutation(n)
    e = ece(m, t)
    assert 0.0 <= e <= 1.0
    assert e == pytest.approx(ece(m[perm], t[perm]))


@pytest.mark.skipif(not os.path.exists(mnist_paths("test")[0]), reason="MNIST files not available")
def test_real_mnist_loads():
    x, y = load_mnist("test")
    assert x.shape == (10_000, 28, 28) and set(np.unique(y)) == set(range(10))
