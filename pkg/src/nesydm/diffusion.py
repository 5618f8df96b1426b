"""Masked-diffusion primitives: schedule, forward masking and reverse posterior.

Sequences are integer arrays with values in ``0..V-1`` and the sentinel
:data:`MASK` (``-1``) for masked entries.  All functions broadcast over
leading batch dimensions; the last axis is the sequence axis.
"""

from dataclasses import dataclass

import numpy as np

MASK = -1


def make_rng(seed=None):
    """Counter-based (Philox) generator; ``rng.spawn(n)`` splits it."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class LinearSchedule:
    """``alpha(t) = 1 - t``."""

    kind: str = "linear"

    def alpha(self, t):
        return 1.0 - np.asarray(t, dtype=np.float64)

    def alpha_prime(self, t):
        return np.full_like(np.asarray(t, dtype=np.float64), -1.0)

    def alpha_inv(self, a):
        return 1.0 - np.asarray(a, dtype=np.float64)


NoisingSchedule = LinearSchedule


def get_schedule(kind="linear"):
    if kind != "linear":
        raise ValueError(f"unknown noising schedule {kind!r}; only 'linear' is implemented")
    return LinearSchedule()


@dataclass(frozen=True)
class MaskedSeq:
    """A length-W sequence over ``0..vocab_size-1`` plus :data:`MASK`."""

    values: np.ndarray
    vocab_size: int

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.int64)
        if vals.ndim != 1:
            raise ValueError("MaskedSeq values must be one-dimensional")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        bad = (vals != MASK) & ((vals < 0) | (vals >= self.vocab_size))
        if bad.any():
            raise ValueError(f"entries {vals[bad].tolist()} outside vocabulary of size {self.vocab_size}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return len(self.values)

    @property
    def masked_indices(self):
        return np.flatnonzero(self.values == MASK)

    @property
    def unmasked_indices(self):
        return np.flatnonzero(self.values != MASK)

    @property
    def is_complete(self):
        return bool((self.values != MASK).all())

    def to_serialized(self):
        """Values shifted to ``1..V`` with the mask written as 0."""
        return np.where(self.values == MASK, 0, self.values + 1)

    @classmethod
    def from_serialized(cls, data, vocab_size):
        data = np.asarray(data, dtype=np.int64)
        return cls(np.where(data == 0, MASK, data - 1), vocab_size)

    @classmethod
    def fully_masked(cls, length, vocab_size):
        return cls(np.full(length, MASK), vocab_size)


def _check_time(t, name="t"):
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError(f"{name} must lie in [0, 1]")
    return t


def forward_mask(w0, t, sched, rng):
    """Mask each entry of a complete sequence independently with prob. ``1 - alpha(t)``.

    ``t`` may be a scalar or broadcast against the leading dimensions of ``w0``.
    """
    w0 = np.asarray(w0, dtype=np.int64)
    if (w0 == MASK).any():
        raise ValueError("forward_mask expects a fully unmasked sequence")
    t = _check_time(t)
    keep = np.asarray(sched.alpha(t))[..., None] if t.ndim else sched.alpha(t)
    u = rng.random(w0.shape)
    return np.where(u < keep, w0, MASK)


def forward_mask_from(ws, s, t, sched, rng):
    """Forward process between two times: ``q(w^t | w^s)`` for ``s < t``."""
    ws = np.asarray(ws, dtype=np.int64)
    s, t = _check_time(s, "s"), _check_time(t)
    keep = sched.alpha(t) / sched.alpha(s)
    if np.ndim(keep):
        keep = keep[..., None]
    u = rng.random(ws.shape)
    return np.where((ws != MASK) & (u < keep), ws, MASK)


def _unmask_probability(s, t, sched):
    s, t = _check_time(s, "s"), _check_time(t)
    if np.any(s >= t):
        raise ValueError("reverse posterior needs s < t")
    a_s, a_t = sched.alpha(s), sched.alpha(t)
    return (a_s - a_t) / (1.0 - a_t)


def reverse_posterior_sample(wt, w0, s, t, sched, rng):
    """Sample ``w^s ~ q(w^s | w^t, w^0)``.

    Unmasked entries of ``wt`` are copied; each masked entry takes the value
    of ``w0`` with probability ``(alpha_s - alpha_t) / (1 - alpha_t)``.
    """
    wt = np.asarray(wt, dtype=np.int64)
    w0 = np.asarray(w0, dtype=np.int64)
    if (w0 == MASK).any():
        raise ValueError("w0 must be fully unmasked")
    if ((wt != MASK) & (wt != w0)).any():
        raise ValueError("wt is inconsistent with w0")
    p = _unmask_probability(s, t, sched)
    if np.ndim(p):
        p = p[..., None]
    u = rng.random(wt.shape)
    return np.where((wt == MASK) & (u < p), w0, wt)


def extends(a, b):
    """``a`` agrees with ``b`` on every unmasked entry of ``b`` (a ⪰ b)."""
    a, b = np.asarray(a), np.asarray(b)
    return bool(np.all((b == MASK) | (a == b)))


def reverse_posterior_pmf(ws, wt, w0, s, t, sched):
    """Closed-form ``q(w^s | w^t, w^0)`` for whole sequences."""
    ws, wt, w0 = (np.asarray(a, dtype=np.int64) for a in (ws, wt, w0))
    p_unmask = float(_unmask_probability(s, t, sched))
    if not (extends(w0, ws) and extends(ws, wt)):
        return 0.0
    n_ws = int((ws == MASK).sum())
    n_wt = int((wt == MASK).sum())
    return (1.0 - p_unmask) ** n_ws * p_unmask ** (n_wt - n_ws)
