"""Evaluation metrics."""

from collections import deque

import numpy as np

from nesydm.programs import dijkstra_path, path_cost


def _aligned(pred, true):
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match {true.shape}")
    return pred, true


def exact_match_accuracy(pred, true):
    """Fraction of rows predicted exactly."""
    pred, true = _aligned(pred, true)
    return float((pred == true).reshape(len(pred), -1).all(axis=1).mean())


def concept_accuracy(pred, true):
    """Micro-averaged accuracy over all concept dimensions."""
    pred, true = _aligned(pred, true)
    return float((pred == true).mean())


def is_valid_path(grid, mask):
    """Marked cells connect the two corners under the grid's connectivity."""
    n = grid.side
    mask = np.asarray(mask, dtype=bool).reshape(n, n)
    if not (mask[0, 0] and mask[-1, -1]):
        return False
    eight = grid.connectivity == "eight"
    seen = {(0, 0)}
    todo = deque([(0, 0)])
    while todo:
        i, j = todo.popleft()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if (di, dj) == (0, 0) or (not eight and di and dj):
                    continue
                a, b = i + di, j + dj
                if 0 <= a < n and 0 <= b < n and mask[a, b] and (a, b) not in seen:
                    seen.add((a, b))
                    todo.append((a, b))
    return (n - 1, n - 1) in seen


def path_cost_accuracy(grid, pred_paths, true_indices):
    """Fraction of predicted paths that are valid and cost the same as the
    optimum under the true cell costs (exact decimal arithmetic)."""
    pred_paths, true_indices = np.asarray(pred_paths), np.asarray(true_indices)
    if pred_paths.shape != true_indices.shape:
        raise ValueError("prediction and cost arrays have different shapes")
    best = dijkstra_path(grid, true_indices).reshape(true_indices.shape)
    hits = 0
    for p, idx, b in zip(pred_paths, true_indices, best):
        if is_valid_path(grid, p) and path_cost(grid, idx, p, exact=True) == path_cost(grid, idx, b, exact=True):
            hits += 1
    return hits / len(pred_paths)


def ece(marginals, truths, bins=10):
    """Expected calibration error over per-dimension marginal predictions.

    ``marginals`` is ``(..., V)``, ``truths`` has the matching leading shape.
    Each dimension contributes one prediction (its argmax) with confidence
    equal to that marginal; predictions are pooled into ``bins`` equal-width
    bins.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    marginals = np.asarray(marginals, dtype=np.float64)
    truths = np.asarray(truths)
    if marginals.shape[:-1] != truths.shape:
        raise ValueError("marginals and truths do not align")
    probs = marginals.reshape(-1, marginals.shape[-1])
    conf = probs.max(axis=1)
    if (conf < 0).any() or (conf > 1 + 1e-12).any():
        raise ValueError("confidences must lie in [0, 1]")
    correct = probs.argmax(axis=1) == truths.reshape(-1)
    which = np.minimum((conf * bins).astype(np.int64), bins - 1)
    n = len(conf)
    count = np.bincount(which, minlength=bins)
    conf_sum = np.bincount(which, weights=conf, minlength=bins)
    acc_sum = np.bincount(which, weights=correct.astype(np.float64), minlength=bins)
    return float(np.abs(acc_sum - conf_sum).sum() / n)
