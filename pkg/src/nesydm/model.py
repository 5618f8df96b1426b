"""Feed-forward unmasking model ``p(w~0 | w^t, x)`` with hand-written backprop.

The network sees the input features and the partially masked concept
sequence and emits one softmax row per concept dimension.  Rows for already
unmasked dimensions are replaced by one-hots (carry-over), so the model never
predicts the mask token and never changes a decoded value.

Two input layouts are supported:

``joint``
    One row per example: ``[x, onehot(w^t_1), ..., onehot(w^t_W)]`` with one
    ``(V+1)``-way one-hot per position (the extra class is the mask token).
    The first linear layer therefore holds a position-specific embedding
    table per concept dimension whose outputs are summed.
``shared``
    One row per concept dimension with weights shared across dimensions.
    ``x`` is split into ``W`` equal slices; row ``i`` holds slice ``i``, then
    (with ``context``) the other slices in cyclic order ``i+1, i+2, ...``, then
    (with ``condition``) the one-hots of ``w^t`` in the same cyclic order.
"""

import struct
from dataclasses import dataclass

import numpy as np

from nesydm.diffusion import MASK

_MAGIC = b"NESYDMCK"
_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    x_dim: int
    concept_dim: int
    vocab: int
    hidden: tuple = (64, 64)
    layout: str = "joint"
    context: bool = True
    condition: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.layout not in ("joint", "shared"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.layout == "shared" and self.x_dim % self.concept_dim:
            raise ValueError("shared layout needs x_dim divisible by concept_dim")
        if self.vocab < 1 or self.concept_dim < 1:
            raise ValueError("vocab and concept_dim must be positive")

    @property
    def input_dim(self):
        w, v1 = self.concept_dim, self.vocab + 1
        if self.layout == "joint":
            return self.x_dim + (w * v1 if self.condition else 0)
        slice_dim = self.x_dim // w
        n_x = w if self.context else 1
        n_wt = (w if self.context else 1) if self.condition else 0
        return n_x * slice_dim + n_wt * v1

    @property
    def output_dim(self):
        return self.vocab if self.layout == "shared" else self.concept_dim * self.vocab

    def layer_sizes(self):
        return (self.input_dim,) + self.hidden + (self.output_dim,)


class ParamSet:
    """Ordered named float arrays with the arithmetic needed by optimisers."""

    def __init__(self, arrays):
        self.arrays = dict(arrays)

    def __getitem__(self, key):
        return self.arrays[key]

    def keys(self):
        return self.arrays.keys()

    def zeros_like(self):
        return GradientBundle({k: np.zeros_like(a) for k, a in self.arrays.items()})

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def unflatten(self, vec):
        out, pos = {}, 0
        for k, a in self.arrays.items():
            out[k] = np.asarray(vec[pos : pos + a.size], dtype=np.float64).reshape(a.shape)
            pos += a.size
        return out

    @property
    def size(self):
        return sum(a.size for a in self.arrays.values())

    def is_finite(self):
        return all(np.isfinite(a).all() for a in self.arrays.values())


class GradientBundle(ParamSet):
    def __add__(self, other):
        return GradientBundle({k: a + other.arrays[k] for k, a in self.arrays.items()})

    def __mul__(self, c):
        return GradientBundle({k: c * a for k, a in self.arrays.items()})

    __rmul__ = __mul__

    def add_(self, other, scale=1.0):
        for k, a in self.arrays.items():
            a += scale * other.arrays[k]
        return self

    def max_abs(self):
        return max(float(np.abs(a).max(initial=0.0)) for a in self.arrays.values())


class ModelParams(ParamSet):
    def __init__(self, arch, arrays):
        super().__init__(arrays)
        self.arch = arch

    def replace(self, arrays):
        return ModelParams(self.arch, arrays)

    def copy(self):
        return self.replace({k: a.copy() for k, a in self.arrays.items()})

    @property
    def n_layers(self):
        return len(self.arch.hidden) + 1


def init_params(arch, rng, scale=1.0, zero_last=False):
    """Gaussian weights with variance ``scale**2 / fan_in``; zero biases."""
    sizes = arch.layer_sizes()
    arrays = {}
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = k == len(sizes) - 2
        if last and zero_last:
            arrays[f"W{k}"] = np.zeros((fan_in, fan_out))
        else:
            arrays[f"W{k}"] = rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out))
        arrays[f"b{k}"] = np.zeros(fan_out)
    return ModelParams(arch, arrays)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _onehot_wt(wt, vocab):
    # mask token occupies the last class
    idx = np.where(wt == MASK, vocab, wt)
    return np.eye(vocab + 1)[idx]


def build_inputs(arch, x, wt):
    """Network input rows for a batch: ``(B, F)`` or ``(B*W, F)``."""
    b, w = wt.shape
    if arch.layout == "joint":
        parts = [x]
        if arch.condition:
            parts.append(_onehot_wt(wt, arch.vocab).reshape(b, -1))
        return np.concatenate(parts, axis=1) if len(parts) > 1 else x
    xs = x.reshape(b, w, -1)
    shifts = range(w) if arch.context else range(1)
    idx = (np.arange(w)[:, None] + np.array(list(shifts))[None, :]) % w
    parts = [xs[:, idx, :].reshape(b, w, -1)]
    if arch.condition:
        oh = _onehot_wt(wt, arch.vocab)
        parts.append(oh[:, idx, :].reshape(b, w, -1))
    return np.concatenate(parts, axis=2).reshape(b * w, -1)


@dataclass
class ForwardCache:
    inputs: list
    probs: np.ndarray
    log_probs: np.ndarray
    wt: np.ndarray


def _as_batch(x, wt):
    x = np.asarray(x, dtype=np.float64)
    wt = np.asarray(wt, dtype=np.int64)
    single = wt.ndim == 1
    if single:
        x, wt = x[None], wt[None]
    if x.shape[0] != wt.shape[0]:
        raise ValueError("x and wt batch sizes differ")
    return x, wt, single


def raw_logits(params, x, wt):
    """Network logits ``(B, W, V)`` before carry-over, plus layer inputs."""
    arch = params.arch
    if not np.isfinite(x).all():
        raise FloatingPointError("non-finite input features")
    h = build_inputs(arch, x, wt)
    inputs = []
    n = params.n_layers
    for k in range(n):
        inputs.append(h)
        h = h @ params[f"W{k}"] + params[f"b{k}"]
        if k < n - 1:
            h = np.tanh(h)
    if not np.isfinite(h).all():
        raise FloatingPointError("non-finite activations in unmasking model")
    return h.reshape(wt.shape[0], arch.concept_dim, arch.vocab), inputs


def apply_carryover(logits, wt):
    """Softmax rows with unmasked rows overwritten by one-hots of ``wt``."""
    vocab = logits.shape[-1]
    z = logits - logits.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    known = wt != MASK
    if known.any():
        onehot = np.eye(vocab, dtype=bool)[np.where(known, wt, 0)]
        log_probs = np.where(known[..., None], np.where(onehot, 0.0, -np.inf), log_probs)
    return np.exp(log_probs), log_probs


def forward_batch(params, x, wt):
    x, wt, _ = _as_batch(x, wt)
    logits, inputs = raw_logits(params, x, wt)
    probs, log_probs = apply_carryover(logits, wt)
    return ForwardCache(inputs, probs, log_probs, wt)


@dataclass(frozen=True)
class UnmaskingDistribution:
    """Row-stochastic ``(..., W, V)`` unmasking probabilities for ``source_wt``."""

    probs: np.ndarray
    source_wt: np.ndarray

    @property
    def log_probs(self):
        with np.errstate(divide="ignore"):
            return np.log(self.probs)


def forward(params, x, wt):
    cache = forward_batch(params, x, wt)
    single = np.asarray(wt).ndim == 1
    probs = cache.probs[0] if single else cache.probs
    return UnmaskingDistribution(probs, np.asarray(wt, dtype=np.int64))


class ConditionalModel:
    """``wt -> probs`` for fixed ``x``; logits are computed once when the
    network ignores ``w^t``."""

    def __init__(self, params, x):
        self.params = params
        self.x = np.asarray(x, dtype=np.float64)
        self._logits = None

    def probs(self, wt):
        wt = np.asarray(wt, dtype=np.int64)
        if self.params.arch.condition:
            logits, _ = raw_logits(self.params, self.x, wt)
        else:
            if self._logits is None:
                self._logits, _ = raw_logits(self.params, self.x, np.full(wt.shape, MASK))
            logits = self._logits
        return apply_carryover(logits, wt)[0]


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample(dist, rng, n=None):
    """Draw complete sequences row-wise; returns ``(w0, logprob)``.

    With ``n`` the result gains a leading sample axis.
    """
    from nesydm.kernels import categorical_sample

    probs = dist.probs
    shape = probs.shape[:-1] if n is None else (n,) + probs.shape[:-1]
    p = np.broadcast_to(probs, shape + probs.shape[-1:])
    w0 = categorical_sample(p, rng.random(shape))
    lp = np.take_along_axis(dist.log_probs if n is None else dist.log_probs[None], w0[..., None], -1)
    return w0, lp[..., 0].sum(axis=-1)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward_logits(params, cache, dlogits):
    """Parameter gradient given ``d objective / d logits`` of shape ``(B, W, V)``.

    Carry-over rows are constant in the parameters, so their entries of
    ``dlogits`` are discarded.
    """
    arch = params.arch
    dl = np.where((cache.wt == MASK)[..., None], dlogits, 0.0)
    delta = dl.reshape(-1, arch.output_dim)
    grads = {}
    for k in range(params.n_layers - 1, -1, -1):
        a = cache.inputs[k]
        grads[f"W{k}"] = a.T @ delta
        grads[f"b{k}"] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params[f"W{k}"].T) * (1.0 - a * a)
    return GradientBundle({key: grads[key] for key in params.keys()})


def logprob_dlogits(cache, w0, weight=1.0):
    """``d/dlogits`` of ``weight * sum_{i masked} log p_i(w0_i)``."""
    vocab = cache.probs.shape[-1]
    onehot = np.eye(vocab)[np.asarray(w0, dtype=np.int64)]
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim:
        weight = weight.reshape(weight.shape + (1,) * (onehot.ndim - weight.ndim))
    return weight * (onehot - cache.probs)


def backward_logprob(params, x, wt, w0, weight=1.0):
    """``weight * grad sum_{i in M(wt)} log p_i(w0_i)``, summed over the batch."""
    cache = forward_batch(params, x, wt)
    w0 = np.asarray(w0, dtype=np.int64).reshape(cache.wt.shape)
    if ((cache.wt != MASK) & (cache.wt != w0)).any():
        raise ValueError("w0 disagrees with the unmasked entries of wt")
    return backward_logits(params, cache, logprob_dlogits(cache, w0, weight))


def entropy_rows(cache):
    p, lp = cache.probs, cache.log_probs
    plogp = np.where(p > 0, p * np.where(p > 0, lp, 0.0), 0.0)
    return np.where(cache.wt == MASK, -plogp.sum(axis=-1), 0.0)


def entropy_dlogits(cache):
    """``d/dlogits`` of the summed row entropies over masked rows."""
    h = entropy_rows(cache)
    lp = np.where(cache.probs > 0, cache.log_probs, 0.0)
    return -cache.probs * (lp + h[..., None])


def backward_entropy(params, x, wt=None):
    """Gradient of ``sum_{i in M(wt)} H(p_i)`` and the entropy value.

    ``wt`` defaults to the fully masked sequence.  Batched inputs return the
    batch sums.
    """
    x = np.asarray(x, dtype=np.float64)
    if wt is None:
        lead = x.shape[:-1]
        wt = np.full(lead + (params.arch.concept_dim,), MASK)
    cache = forward_batch(params, x, wt)
    value = float(entropy_rows(cache).sum())
    return backward_logits(params, cache, entropy_dlogits(cache)), value


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, **kw):
        zeros = {k: np.zeros_like(a) for k, a in params.arrays.items()}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, lr=lr, **kw)


def adam_step(params, state, grad):
    """One Adam descent step on ``grad``; updates ``params`` and ``state`` in place."""
    if set(grad.keys()) != set(params.keys()):
        raise ValueError("gradient keys do not match parameters")
    for k, g in grad.arrays.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient entries in {k}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grad.arrays.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.arrays[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if not params.is_finite():
        raise FloatingPointError("non-finite parameters after Adam step")
    return params, state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params):
    items = list(params.arrays.items())
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(items)))
        for name, a in items:
            raw = name.encode()
            fh.write(struct.pack("<HB", len(raw), a.ndim))
            fh.write(raw)
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        for _, a in items:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path, arch):
    """Read a checkpoint and check its shape table against ``arch``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 8)
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos, table = 16, []
        for _ in range(count):
            nlen, ndim = struct.unpack_from("<HB", data, pos)
            pos += 3
            name = data[pos : pos + nlen].decode()
            pos += nlen
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            table.append((name, shape))
        arrays = {}
        for name, shape in table:
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(data):
                raise CheckpointError("truncated checkpoint")
            arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    expected = init_params(arch, np.random.default_rng(0))
    for k, a in expected.arrays.items():
        if k not in arrays or arrays[k].shape != a.shape:
            got = arrays[k].shape if k in arrays else None
            raise CheckpointError(f"checkpoint does not match configuration: {k} has shape {got}, expected {a.shape}")
    if set(arrays) != set(expected.keys()):
        raise CheckpointError("checkpoint has unexpected arrays")
    return ModelParams(arch, {k: arrays[k] for k in expected.keys()})
