"""Gradient estimation for the neurosymbolic diffusion NELBO.

Everything here is batched: ``x`` is ``(B, D)``, concept sequences are
``(B, W)`` and outputs ``(B, Y)``.  Gradient bundles are *sums* over the
batch unless stated otherwise; :func:`estimate_gradient` returns the batch
mean.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from nesydm.diffusion import MASK, forward_mask, reverse_posterior_sample
from nesydm.inference import first_hitting, time_discretized
from nesydm.kernels import categorical_sample, weighted_onehot_sum
from nesydm.model import (
    ConditionalModel,
    backward_logits,
    entropy_dlogits,
    entropy_rows,
    forward_batch,
    logprob_dlogits,
)

ENUMERATION_CAP = 200_000


class EnumerationCapError(ValueError):
    """Raised when exact enumeration would exceed the state cap."""


@dataclass(frozen=True)
class LossWeights:
    gamma_w: float = 1e-5
    gamma_H: float = 0.0
    gamma_y: float = 1.0

    def __post_init__(self):
        if min(self.gamma_w, self.gamma_H, self.gamma_y) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class TrainHyper:
    S: int = 16
    K: int = 16
    beta: float = 10.0
    entropy_mode: str = "unconditional"
    M: float = 70.0
    U: float = 100.0
    T: int = 8

    def __post_init__(self):
        if self.S < 2:
            raise ValueError("RLOO needs S >= 2")
        if self.K < 1:
            raise ValueError("SNIS needs K >= 1")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.entropy_mode not in ("unconditional", "conditional"):
            raise ValueError(f"unknown entropy mode {self.entropy_mode!r}")


@dataclass
class GradientInfo:
    """Diagnostics from one gradient estimate."""

    mu_zero: int = 0
    mu_total: int = 0
    concept_loss: float = 0.0
    entropy: float = 0.0
    parts: dict = field(default_factory=dict)

    @property
    def mu_zero_rate(self):
        return self.mu_zero / self.mu_total if self.mu_total else 0.0


# ---------------------------------------------------------------------------
# Constraint rewards and SNIS
# ---------------------------------------------------------------------------


def violations(prog, w, y0):
    """Number of output dimensions where ``prog(w)`` differs from ``y0``."""
    return (prog.eval(w) != np.asarray(y0)).sum(axis=-1)


def relaxed_reward(prog, w0, y0, beta):
    return np.exp(-beta * violations(prog, w0, y0))


def stable_log_rewards(counts, beta, M=70.0, U=100.0):
    """Rescaled SNIS weights ``exp(-min(beta * c - L, U))`` along the last axis.

    ``L`` shifts the best candidate to at most ``exp(M)``; ``U`` floors the
    worst.  Ratios between candidates are those of ``exp(-beta * c)`` unless
    the floor binds.
    """
    e = beta * np.asarray(counts, dtype=np.float64)
    shift = np.minimum(e.mean(axis=-1, keepdims=True), M + e.min(axis=-1, keepdims=True))
    return np.exp(-np.minimum(e - shift, U))


def snis_select(probs, prog, y0, K, beta, rng, M=70.0, U=100.0):
    """Draw ``K`` candidates per row of ``probs`` and resample one by reward.

    ``probs`` is ``(B, W, V)`` (or ``(W, V)``); returns ``(B, W)`` (or ``(W,)``).
    """
    probs = np.asarray(probs, dtype=np.float64)
    single = probs.ndim == 2
    if single:
        probs, y0 = probs[None], np.asarray(y0)[None]
    if K < 1:
        raise ValueError("K must be at least 1")
    cand = categorical_sample(np.broadcast_to(probs, (K,) + probs.shape), rng.random((K,) + probs.shape[:-1]))
    if K == 1:
        out = cand[0]
    else:
        counts = violations(prog, cand, np.asarray(y0)[None])
        w = stable_log_rewards(counts.T, beta, M, U)
        pick = categorical_sample(w / w.sum(axis=1, keepdims=True), rng.random(w.shape[0]))
        out = cand[pick, np.arange(cand.shape[1])]
    return out[0] if single else out


def sample_variational(params, x, y0, prog, hyper, sched, rng):
    """Approximate draw from ``q(w0 | x, y0)``.

    Runs the first-hitting sampler (time-discretised when ``W > T``) with every
    unmasking proposal replaced by an SNIS selection.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y0 = np.atleast_2d(np.asarray(y0, dtype=np.int64))
    W = params.arch.concept_dim
    cond = ConditionalModel(params, x)

    def draw(probs, wt):
        return snis_select(probs, prog, y0, hyper.K, hyper.beta, rng, hyper.M, hyper.U)

    if W <= hyper.T:
        return first_hitting(cond.probs, len(x), W, sched, rng, draw=draw)
    return time_discretized(cond.probs, len(x), W, hyper.T, sched, rng, draw=draw)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def _time_weight(t, sched):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("t must be in (0, 1]")
    return sched.alpha_prime(t) / (1.0 - sched.alpha(t))


def concept_dlogits(cache, w0, t, sched):
    """dlogits and per-example value of the concept unmasking loss."""
    weight = _time_weight(t, sched) * np.ones(len(cache.wt))
    masked = cache.wt == MASK
    lp = np.take_along_axis(cache.log_probs, np.asarray(w0)[..., None], -1)[..., 0]
    value = weight * np.where(masked, lp, 0.0).sum(axis=1)
    return logprob_dlogits(cache, w0, weight), value


def concept_loss_grad(params, x, w0, wt, t, sched):
    """Gradient and value of ``a'/(1-a) * sum_{i masked} log p(w0_i | wt, x)``."""
    cache = forward_batch(params, x, wt)
    w0 = np.asarray(w0, dtype=np.int64).reshape(cache.wt.shape)
    dl, value = concept_dlogits(cache, w0, t, sched)
    return backward_logits(params, cache, dl), float(value.sum())


def rloo_dlogits(cache, y0, prog, S, t, sched, rng):
    """RLOO estimate of ``d L_y / d logits`` for a batch.

    Returns ``(dlogits, mu_zero_count, mu_total)``.  Output dimensions where
    no sample matches ``y0`` carry no signal and are skipped.
    """
    if S < 2:
        raise ValueError("RLOO needs S >= 2")
    probs = cache.probs
    B = probs.shape[0]
    samples = categorical_sample(np.broadcast_to(probs, (S,) + probs.shape), rng.random((S,) + probs.shape[:-1]))
    hit = prog.eval(samples) == np.asarray(y0)[None]
    mu = hit.mean(axis=0)
    ok = mu > 0
    safe_mu = np.where(ok, mu, 1.0)
    per_dim = np.where(ok[None], (hit - mu[None]) / (safe_mu[None] * (S - 1)), 0.0)
    coef = sched.alpha_prime(t) * np.ones(B) * per_dim.sum(axis=2)
    coef = np.ascontiguousarray(coef.T)
    counts = weighted_onehot_sum(np.ascontiguousarray(samples.transpose(1, 0, 2)), coef, probs.shape[-1])
    dl = counts - coef.sum(axis=1)[:, None, None] * probs
    return dl, int((~ok).sum()), int(ok.size)


def rloo_output_grad(params, x, wt, y0, prog, S, t, sched, rng, info=None):
    cache = forward_batch(params, x, wt)
    dl, zero, total = rloo_dlogits(cache, np.atleast_2d(y0), prog, S, t, sched, rng)
    if info is not None:
        info.mu_zero += zero
        info.mu_total += total
    return backward_logits(params, cache, dl)


def _enumerated(prog):
    n = prog.concept_vocab**prog.concept_dim
    if n > ENUMERATION_CAP:
        raise EnumerationCapError(
            f"{n} concept sequences exceed the enumeration cap of {ENUMERATION_CAP}; "
            "use entropy_mode='unconditional'"
        )
    cached = getattr(prog, "_enum_cache", None)
    if cached is None:
        seqs = prog.all_sequences()
        cached = (seqs, prog.eval(seqs))
        prog._enum_cache = cached
    return cached


def conditional_dlogits(cache, y0, prog):
    """Exact conditional 1-step entropy and its logit gradient, per example."""
    seqs, outs = _enumerated(prog)
    lp = cache.log_probs
    W = seqs.shape[1]
    logp = sum(lp[:, i, seqs[:, i]] for i in range(W))
    consistent = (outs[None] == np.asarray(y0)[:, None, :]).all(axis=2)
    if not consistent.any(axis=1).all():
        raise ValueError("no concept sequence is consistent with y0")
    logp = np.where(consistent, logp, -np.inf)
    logz = np.logaddexp.reduce(logp, axis=1)
    logq = logp - logz[:, None]
    q = np.exp(logq)
    logq_safe = np.where(q > 0, logq, 0.0)
    H = -(q * logq_safe).sum(axis=1)
    coef = -q * (logq_safe + H[:, None])
    B = len(q)
    dl = weighted_onehot_sum(np.broadcast_to(seqs, (B,) + seqs.shape), coef, lp.shape[-1])
    return dl, H


def conditional_entropy_grad(params, x, y0, prog):
    """Gradient and value of ``H[q(w0 | w^1 = m, y0, x)]`` by enumeration."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    wt = np.full((len(x), params.arch.concept_dim), MASK)
    _enumerated(prog)
    cache = forward_batch(params, x, wt)
    dl, H = conditional_dlogits(cache, np.atleast_2d(y0), prog)
    return backward_logits(params, cache, dl), float(H.sum())


def estimate_gradient(params, x, y0, prog, weights, hyper, sched, rng, info=None):
    """Weighted NELBO gradient for a minibatch, averaged over examples.

    Returns ``(gamma_w / W) g_w + (gamma_y / Y) g_y + (gamma_H / W) g_H`` where
    ``g_H`` is the gradient of the negative entropy.  The dependence of the
    variational sample on the parameters is not differentiated.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y0 = np.atleast_2d(np.asarray(y0, dtype=np.int64))
    info = info if info is not None else GradientInfo()
    B, W, Y = len(x), params.arch.concept_dim, prog.output_dim
    w0 = sample_variational(params, x, y0, prog, hyper, sched, rng)
    t = 1.0 - rng.random(B)
    wt = forward_mask(w0, t, sched, rng)
    cache = forward_batch(params, x, wt)
    dl = np.zeros_like(cache.probs)
    if weights.gamma_y:
        dl_y, zero, total = rloo_dlogits(cache, y0, prog, hyper.S, t, sched, rng)
        info.mu_zero += zero
        info.mu_total += total
        dl += (weights.gamma_y / Y) * dl_y
    if weights.gamma_w:
        dl_w, value = concept_dlogits(cache, w0, t, sched)
        info.concept_loss += float(value.sum())
        dl += (weights.gamma_w / W) * dl_w
    grad = backward_logits(params, cache, dl)
    if weights.gamma_H:
        masked = np.full((B, W), MASK)
        hcache = forward_batch(params, x, masked)
        if hyper.entropy_mode == "conditional":
            dl_h, H = conditional_dlogits(hcache, y0, prog)
        else:
            dl_h, H = entropy_dlogits(hcache), entropy_rows(hcache).sum(axis=1)
        info.entropy += float(H.sum())
        grad.add_(backward_logits(params, hcache, dl_h), -weights.gamma_H / W)
    return grad * (1.0 / B)


# ---------------------------------------------------------------------------
# NELBO value
# ---------------------------------------------------------------------------


def exact_log_wmc(cache, y0, prog):
    """``log sum_w p(w | wt, x) [prog(w)_i = y0_i]`` per example and output dim."""
    seqs, outs = _enumerated(prog)
    W = seqs.shape[1]
    p = np.ones((cache.probs.shape[0], len(seqs)))
    for i in range(W):
        p = p * cache.probs[:, i, seqs[:, i]]
    hit = outs[None] == np.asarray(y0)[:, None, :]
    wmc = np.einsum("bn,bny->by", p, hit)
    with np.errstate(divide="ignore"):
        return np.log(wmc)


def sampled_log_wmc(cache, y0, prog, S, rng):
    probs = cache.probs
    samples = categorical_sample(np.broadcast_to(probs, (S,) + probs.shape), rng.random((S,) + probs.shape[:-1]))
    hit = prog.eval(samples) == np.asarray(y0)[None]
    with np.errstate(divide="ignore"):
        return np.log(hit.mean(axis=0))


def nelbo_terms(params, x, y0, w0, prog, sched, rng, S=None):
    """Per-example single-sample ``L_w + L_y`` for given variational draws ``w0``."""
    t = 1.0 - rng.random(len(x))
    wt = forward_mask(w0, t, sched, rng)
    cache = forward_batch(params, x, wt)
    _, lw = concept_dlogits(cache, w0, t, sched)
    try:
        log_wmc = exact_log_wmc(cache, y0, prog)
    except EnumerationCapError:
        log_wmc = sampled_log_wmc(cache, y0, prog, S or 16, rng)
    ly = sched.alpha_prime(t) * log_wmc.sum(axis=1)
    return lw + ly


def exact_conditional_sample(params, x, y0, prog, n, rng):
    """``n`` draws per example from the 1-step conditional
    ``q(w0 | w^1 = m, y0, x)`` and its entropy.  Returns ``((n, B, W), H)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y0 = np.atleast_2d(np.asarray(y0, dtype=np.int64))
    seqs, outs = _enumerated(prog)
    cache = forward_batch(params, x, np.full((len(x), params.arch.concept_dim), MASK))
    logp = sum(cache.log_probs[:, i, seqs[:, i]] for i in range(seqs.shape[1]))
    consistent = (outs[None] == y0[:, None, :]).all(axis=2)
    logp = np.where(consistent, logp, -np.inf)
    q = np.exp(logp - np.logaddexp.reduce(logp, axis=1)[:, None])
    _, H = conditional_dlogits(cache, y0, prog)
    cdf = np.cumsum(q, axis=1)
    u = rng.random((n, len(x))) * cdf[:, -1][None]
    pick = np.stack([np.searchsorted(cdf[b], u[:, b], side="right") for b in range(len(x))], axis=1)
    return seqs[np.minimum(pick, len(seqs) - 1)], H


def nelbo_value_estimate(params, x, y0, prog, hyper, sched, rng, samples=1, variational="snis"):
    """Monte-Carlo NELBO averaged over a batch.

    ``variational="snis"`` draws ``w0`` with the training sampler and uses the
    entropy per ``hyper.entropy_mode`` at the fully masked sequence (a
    surrogate, as the SNIS sampler has no tractable entropy).
    ``variational="exact"`` draws from the enumerated 1-step conditional and
    uses its exact entropy, which makes the estimate an unbiased estimate of
    a true upper bound on ``-log p(y0 | x)``.

    Returns ``(mean, standard_error)``; the error treats examples and samples
    as independent draws of the per-example loss.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y0 = np.atleast_2d(np.asarray(y0, dtype=np.int64))
    B = len(x)
    xs = np.repeat(x, samples, axis=0)
    ys = np.repeat(y0, samples, axis=0)
    if variational == "exact":
        w0, H = exact_conditional_sample(params, x, y0, prog, samples, rng)
        w0 = w0.transpose(1, 0, 2).reshape(B * samples, -1)
    elif variational == "snis":
        w0 = sample_variational(params, xs, ys, prog, hyper, sched, rng)
        hcache = forward_batch(params, x, np.full((B, params.arch.concept_dim), MASK))
        if hyper.entropy_mode == "conditional":
            _, H = conditional_dlogits(hcache, y0, prog)
        else:
            H = entropy_rows(hcache).sum(axis=1)
    else:
        raise ValueError(f"unknown variational mode {variational!r}")
    terms = nelbo_terms(params, xs, ys, w0, prog, sched, rng, hyper.S).reshape(B, samples) - H[:, None]
    mean = float(terms.mean())
    if terms.size < 2 or not np.isfinite(terms).all():
        # an SNIS draw that violates y0 makes the bound infinite
        return mean, float("nan")
    return mean, float(terms.std(ddof=1) / math.sqrt(terms.size))


def mdm_nelbo_estimate(params, x, w0, sched, rng, n, T=None):
    """Monte-Carlo concept-only diffusion NELBO of a fixed ``w0``.

    ``T=None`` gives the continuous-time loss; an integer ``T`` gives the
    ``T``-step discrete-time loss: a reconstruction term plus one independently
    sampled term per unmasking step.
    Returns ``(mean, standard_error)``.
    """
    x = np.asarray(x, dtype=np.float64)
    w0 = np.asarray(w0, dtype=np.int64)
    xs = np.repeat(x[None], n, axis=0)
    w0s = np.repeat(w0[None], n, axis=0)

    def masked_nll(wt, revealed):
        cache = forward_batch(params, xs, wt)
        lp = np.take_along_axis(cache.log_probs, w0s[..., None], -1)[..., 0]
        return -np.where(revealed, lp, 0.0).sum(axis=1)

    if T is None:
        t = 1.0 - rng.random(n)
        wt = forward_mask(w0s, t, sched, rng)
        vals = -_time_weight(t, sched) * masked_nll(wt, wt == MASK)
    else:
        if T < 1:
            raise ValueError("T must be at least 1")
        w1 = forward_mask(w0s, np.full(n, 1.0 / T), sched, rng)
        vals = masked_nll(w1, w1 == MASK)
        for k in range(2, T + 1):
            t, s = k / T, (k - 1) / T
            wt = forward_mask(w0s, t, sched, rng)
            ws = reverse_posterior_sample(wt, w0s, s, t, sched, rng)
            vals = vals + masked_nll(wt, (wt == MASK) & (ws != MASK))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))
