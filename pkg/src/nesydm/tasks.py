"""Datasets: noisy XOR, MNIST addition (IDX files) and synthetic grid paths."""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from nesydm.programs import AdditionProgram, GridSpec, ShortestPathProgram, XorProgram, dijkstra_path

DATA_ENV = "NESYDM_DATA_DIR"
DEFAULT_DATA_DIR = "/root/data/mnist"
CACHE_FORMAT_VERSION = 1

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Inputs ``x`` ``(n, D)``, outputs ``y0`` ``(n, Y)`` and optional concepts.

    ``w_true`` is kept for evaluation only; training never reads it.
    """

    x: np.ndarray
    y0: np.ndarray
    w_true: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.x) != len(self.y0) or (self.w_true is not None and len(self.w_true) != len(self.x)):
            raise ValueError("dataset arrays have different lengths")

    def __len__(self):
        return len(self.x)

    def subset(self, idx):
        w = None if self.w_true is None else self.w_true[idx]
        return Dataset(self.x[idx], self.y0[idx], w, dict(self.meta))

    def save(self, path):
        arrays = {"x": self.x, "y0": self.y0, "format_version": np.array(CACHE_FORMAT_VERSION)}
        if self.w_true is not None:
            arrays["w_true"] = self.w_true
        for k, v in self.meta.items():
            arrays[f"meta_{k}"] = np.asarray(v)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            version = int(data["format_version"]) if "format_version" in data else None
            if version != CACHE_FORMAT_VERSION:
                raise ValueError(f"unsupported dataset cache version {version}")
            meta = {k[5:]: data[k].item() if data[k].ndim == 0 else data[k] for k in data if k.startswith("meta_")}
            w = data["w_true"] if "w_true" in data else None
            return cls(data["x"], data["y0"], w, meta)


# ---------------------------------------------------------------------------
# XOR
# ---------------------------------------------------------------------------


def make_xor_task(n_examples, noise_sigma, rng):
    """Two hidden bits, each shown as a noisy 2-dim one-hot; label is their XOR."""
    bits = rng.integers(0, 2, size=(n_examples, 2))
    x = np.eye(2)[bits].reshape(n_examples, 4) + noise_sigma * rng.normal(size=(n_examples, 4))
    y0 = XorProgram().eval(bits)
    return Dataset(x, y0, bits, {"task": "xor"})


# ---------------------------------------------------------------------------
# IDX files and MNIST addition
# ---------------------------------------------------------------------------


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


def _read_idx(path, magic):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise IdxTruncatedError(f"{path}: file too short for a header")
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    n = int(np.prod(dims, dtype=np.int64))
    if len(data) - header < n:
        raise IdxTruncatedError(f"{path}: expected {n} bytes of data, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=header).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as an IDX file (3-d images or 1-d labels)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx_pair(images_path, labels_path):
    """Images scaled to ``[0, 1]`` and integer labels."""
    images = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if labels.max(initial=0) > 9:
        raise IdxError("labels outside [0, 9]")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def mnist_paths(split="train", data_dir=None):
    data_dir = data_dir or os.environ.get(DATA_ENV, DEFAULT_DATA_DIR)
    prefix = "train" if split == "train" else "t10k"
    return (
        os.path.join(data_dir, f"{prefix}-images-idx3-ubyte"),
        os.path.join(data_dir, f"{prefix}-labels-idx1-ubyte"),
    )


def load_mnist(split="train", data_dir=None):
    return load_idx_pair(*mnist_paths(split, data_dir))


def make_addition_task(images, labels, n_digits, rng):
    """Partition a shuffled digit pool into sums of two ``n_digits`` numbers.

    Every digit image is used exactly once; leftovers are dropped.
    """
    per = 2 * n_digits
    if len(labels) < per:
        raise ValueError(f"need at least {per} digits, got {len(labels)}")
    n_ex = len(labels) // per
    order = rng.permutation(len(labels))[: n_ex * per].reshape(n_ex, per)
    w = labels[order]
    x = images[order].reshape(n_ex, -1)
    y0 = AdditionProgram(n_digits).eval(w)
    return Dataset(x, y0, w, {"task": "addition", "n_digits": n_digits})


# ---------------------------------------------------------------------------
# Grid paths
# ---------------------------------------------------------------------------


def path_features(cost_indices, n_costs, patch, noise_sigma, rng):
    """Each cell becomes ``patch * patch`` noisy copies of its cost one-hot."""
    n, cells = cost_indices.shape
    reps = patch * patch
    clean = np.repeat(np.eye(n_costs)[cost_indices][:, :, None, :], reps, axis=2)
    return (clean + noise_sigma * rng.normal(size=clean.shape)).reshape(n, cells * reps * n_costs)


def make_path_task(grid, n_examples, noise_sigma, rng, patch=3):
    idx = rng.integers(0, len(grid.cost_table), size=(n_examples, grid.n_cells))
    x = path_features(idx, len(grid.cost_table), patch, noise_sigma, rng)
    y0 = dijkstra_path(grid, idx).astype(np.int64).reshape(n_examples, -1)
    return Dataset(x, y0, idx, {"task": "path", "side": grid.side, "patch": patch})


def program_for(task, **kw):
    if task == "xor":
        return XorProgram()
    if task == "addition":
        return AdditionProgram(kw.get("n_digits", 1))
    if task == "path":
        return ShortestPathProgram(GridSpec(kw.get("side", 4), connectivity=kw.get("connectivity", "eight")))
    raise ValueError(f"unknown task {task!r}")
