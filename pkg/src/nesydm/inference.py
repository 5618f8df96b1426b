"""Reverse-process samplers and majority-vote prediction."""

from dataclasses import dataclass

import numpy as np

from nesydm.diffusion import MASK, reverse_posterior_sample
from nesydm.kernels import categorical_sample
from nesydm.model import ConditionalModel

OUTPUT_MODES = ("PTM", "PMM", "TMP", "MMP")
CONCEPT_MODES = ("TM", "MM")


@dataclass(frozen=True)
class VoteStrategy:
    output_mode: str = "PTM"
    concept_mode: str = "TM"
    L: int = 8

    def __post_init__(self):
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"unknown output mode {self.output_mode!r}")
        if self.concept_mode not in CONCEPT_MODES:
            raise ValueError(f"unknown concept mode {self.concept_mode!r}")
        if self.L < 1:
            raise ValueError("L must be at least 1")


def draw_rows(probs, rng):
    """One categorical draw per row of ``probs`` ``(..., W, V)``."""
    return categorical_sample(probs, rng.random(probs.shape[:-1]))


def _pick_masked(wt, rng):
    """A uniformly random masked index per row of ``wt`` ``(B, W)``."""
    masked = wt == MASK
    k = masked.sum(axis=1)
    j = np.minimum((rng.random(len(wt)) * k).astype(np.int64), k - 1)
    return np.argmax(np.cumsum(masked, axis=1) > j[:, None], axis=1)


def first_hitting(probs_fn, batch, W, sched, rng, draw=None, return_times=False):
    """First-hitting sampler over a batch.

    ``probs_fn(wt)`` returns ``(B, W, V)`` unmasking probabilities.  ``draw``
    maps ``(probs, wt)`` to a full ``(B, W)`` proposal; only the chosen
    dimension is kept at each step.
    """
    draw = draw or (lambda p, wt: draw_rows(p, rng))
    wt = np.full((batch, W), MASK, dtype=np.int64)
    t = np.ones(batch)
    times = []
    rows = np.arange(batch)
    for k in range(W, 0, -1):
        u = rng.random(batch)
        t = sched.alpha_inv(1.0 - u ** (1.0 / k) * (1.0 - sched.alpha(t)))
        i = _pick_masked(wt, rng)
        proposal = draw(probs_fn(wt), wt)
        wt[rows, i] = proposal[rows, i]
        times.append(t)
    return (wt, np.stack(times, axis=1)) if return_times else wt


def time_discretized(probs_fn, batch, W, T, sched, rng, draw=None):
    """``T`` rounds of: propose a full sequence, then remask to the next time."""
    if T < 1:
        raise ValueError("T must be at least 1")
    draw = draw or (lambda p, wt: draw_rows(p, rng))
    wt = np.full((batch, W), MASK, dtype=np.int64)
    for k in range(T, 0, -1):
        proposal = draw(probs_fn(wt), wt)
        if k == 1:
            wt = proposal
        else:
            wt = reverse_posterior_sample(wt, proposal, (k - 1) / T, k / T, sched, rng)
    return wt


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 1 else (x, False)


def first_hitting_sample(params, x, sched, rng, n=1):
    """``n`` exact reverse-process samples per input; shape ``(n, B, W)`` or ``(n, W)``."""
    xb, single = _batched(x)
    rep = np.repeat(xb[None], n, axis=0).reshape(n * len(xb), -1)
    cond = ConditionalModel(params, rep)
    out = first_hitting(cond.probs, len(rep), params.arch.concept_dim, sched, rng)
    out = out.reshape(n, len(xb), -1)
    return out[:, 0] if single else out


def time_discretized_sample(params, x, T, sched, rng, n=1):
    xb, single = _batched(x)
    rep = np.repeat(xb[None], n, axis=0).reshape(n * len(xb), -1)
    cond = ConditionalModel(params, rep)
    out = time_discretized(cond.probs, len(rep), params.arch.concept_dim, T, sched, rng)
    out = out.reshape(n, len(xb), -1)
    return out[:, 0] if single else out


def sample_concepts(params, x, L, sched, rng, T=None):
    """Dispatch: first-hitting when ``T`` is unset or ``T >= W``."""
    if T is None or T >= params.arch.concept_dim:
        return first_hitting_sample(params, x, sched, rng, n=L)
    return time_discretized_sample(params, x, T, sched, rng, n=L)


# ---------------------------------------------------------------------------
# Voting
# ---------------------------------------------------------------------------


def true_mode(samples):
    """Most frequent full vector along axis 0 of ``(L, ..., D)``.

    Ties go to the lexicographically smallest vector.
    """
    samples = np.asarray(samples, dtype=np.int64)
    if samples.shape[0] == 0:
        raise ValueError("need at least one sample")
    L, lead, D = samples.shape[0], samples.shape[1:-1], samples.shape[-1]
    flat = samples.reshape(L, -1, D)
    out = np.empty(flat.shape[1:], dtype=np.int64)
    for b in range(flat.shape[1]):
        rows, counts = np.unique(flat[:, b], axis=0, return_counts=True)
        out[b] = rows[np.argmax(counts)]
    return out.reshape(lead + (D,))


def marginal_mode(samples, vocab=None):
    """Per-dimension mode along axis 0; ties go to the smallest value."""
    samples = np.asarray(samples, dtype=np.int64)
    if samples.shape[0] == 0:
        raise ValueError("need at least one sample")
    vocab = vocab or int(samples.max()) + 1
    counts = (samples[..., None] == np.arange(vocab)).sum(axis=0)
    return counts.argmax(axis=-1)


def predict_concepts(samples, mode="TM", vocab=None):
    if mode == "TM":
        return true_mode(samples)
    if mode == "MM":
        return marginal_mode(samples, vocab)
    raise ValueError(f"unknown concept mode {mode!r}")


def vote_outputs(samples, prog, mode):
    """Combine concept samples ``(L, ..., W)`` into an output prediction."""
    if mode == "PTM":
        return true_mode(prog.eval(samples))
    if mode == "PMM":
        return marginal_mode(prog.eval(samples), prog.output_vocab)
    if mode == "TMP":
        return prog.eval(true_mode(samples))
    if mode == "MMP":
        return prog.eval(marginal_mode(samples, prog.concept_vocab))
    raise ValueError(f"unknown output mode {mode!r}")


def predict_output(params, x, prog, strategy, sched, rng, T=None, samples=None):
    """Majority-vote output prediction from ``strategy.L`` concept samples.

    Pre-drawn ``samples`` may be passed to share them with concept prediction.
    """
    if samples is None:
        samples = sample_concepts(params, x, strategy.L, sched, rng, T)
    return vote_outputs(samples, prog, strategy.output_mode)


def marginals_from_samples(samples, vocab):
    samples = np.asarray(samples, dtype=np.int64)
    return (samples[..., None] == np.arange(vocab)).mean(axis=0)


def estimate_marginals(params, x, L, sched, rng, T=None):
    """Empirical per-dimension concept frequencies from ``L`` samples."""
    if L < 1:
        raise ValueError("L must be at least 1")
    samples = sample_concepts(params, x, L, sched, rng, T)
    return marginals_from_samples(samples, params.arch.vocab)
