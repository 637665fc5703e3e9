"""Closed-form categorical diffusion over the agent axis.

Events diffuse toward a uniform distribution over the N agent categories:
q(E_s | E_0) = Cat(abar_s E_0 + (1 - abar_s)/N). The reverse chain plugs
the network's clean-event prediction into the exact single-step posterior.
All formulas here index the *reduced* categorical schedule.

The variational terms are differentiable in the predicted probabilities
(engine tensors); the samplers are plain numpy.
"""

from __future__ import annotations

import numpy as np

from . import engine as E
from .schedule import Schedule

LOG_CLAMP = 1e-12

_clamp_events = 0


def clamp_count() -> int:
    """How many times the likelihood term hit the probability floor."""
    return _clamp_events


def reset_clamp_count():
    global _clamp_events
    _clamp_events = 0


def _mixture(onehot_or_probs: np.ndarray, coef: float) -> np.ndarray:
    N = onehot_or_probs.shape[-1]
    return coef * onehot_or_probs + (1.0 - coef) / N


def q_sample_categorical(E0_onehot: np.ndarray, s_d: int,
                         rng: np.random.Generator, disc: Schedule) -> np.ndarray:
    """Draw E_s one-hot rows from the closed-form marginal at step s_d."""
    if not 1 <= s_d <= disc.S:
        raise ValueError(f"step {s_d} outside [1, {disc.S}]")
    probs = _mixture(E0_onehot, disc.alpha_bar[s_d])
    return _draw_rows(probs, rng)


def _draw_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized categorical draw per row; returns one-hot rows."""
    cdf = probs.cumsum(axis=-1)
    cdf[..., -1] = 1.0
    u = rng.random(probs.shape[:-1] + (1,))
    idx = (u > cdf).sum(axis=-1)
    out = np.zeros_like(probs)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def theta_post(E_s_onehot, E0_probs, s_d: int, disc: Schedule):
    """Posterior q(E_{s-1} | E_s, E_0) row probabilities.

    theta ~ [alpha_s E_s + (1-alpha_s)/N] * [abar_{s-1} E_0 + (1-abar_{s-1})/N],
    renormalized per row. Accepts engine tensors (differentiable through
    ``E0_probs``) or numpy arrays; returns the same kind.
    """
    if not 1 <= s_d <= disc.S:
        raise ValueError(f"step {s_d} outside [1, {disc.S}]")
    alpha = float(disc.alpha[s_d - 1])
    abar_prev = float(disc.alpha_bar[s_d - 1])
    if isinstance(E0_probs, E.Tensor):
        N = E0_probs.shape[-1]
        e_s = E_s_onehot if isinstance(E_s_onehot, E.Tensor) else E.tensor(E_s_onehot)
        fac1 = E.add(E.mul(e_s, alpha), (1.0 - alpha) / N)
        fac2 = E.add(E.mul(E0_probs, abar_prev), (1.0 - abar_prev) / N)
        raw = E.mul(fac1, fac2)
        norm = E.sum_axis(raw, axis=-1, keepdims=True)
        if np.any(norm.v <= 0):
            raise ValueError("posterior normalizer vanished")
        return E.div(raw, E.broadcast_to(norm, raw.shape))
    raw = _mixture(np.asarray(E_s_onehot), alpha) * _mixture(np.asarray(E0_probs), abar_prev)
    norm = raw.sum(axis=-1, keepdims=True)
    if np.any(norm <= 0):
        raise ValueError("posterior normalizer vanished")
    return raw / norm


def kl_categorical(p, q):
    """KL(p || q) in nats over the last axis, with the 0 log 0 = 0 rule.

    Returns a scalar for a single distribution, a per-row tensor for
    stacked rows. ``q`` must be positive wherever ``p`` is.
    """
    if isinstance(q, E.Tensor):
        p_t = p if isinstance(p, E.Tensor) else E.tensor(p)
        support = p_t.v > 0
        if np.any(q.v[support] <= 0):
            raise ValueError("KL undefined: q vanishes on the support of p")
        # log(p/q) evaluated on the support only; off-support rows contribute 0
        safe_p = np.where(support, p_t.v, 1.0)
        ratio = E.div(E.tensor(safe_p, dtype=q.dtype),
                      E.maximum_const(q, LOG_CLAMP))
        terms = E.mul(E.tensor(np.where(support, p_t.v, 0.0), dtype=q.dtype),
                      E.log(ratio))
        return E.sum_axis(terms, axis=-1, keepdims=False)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    support = p > 0
    if np.any(q[support] <= 0):
        raise ValueError("KL undefined: q vanishes on the support of p")
    terms = np.where(support, p * np.log(np.where(support, p, 1.0) / np.where(q > 0, q, 1.0)), 0.0)
    return terms.sum(axis=-1)


def discrete_vb_term(s_d: int, E0_onehot: np.ndarray, E_s_onehot: np.ndarray,
                     E0_hat_probs, disc: Schedule):
    """Per-step variational term for the event channel, averaged over rows.

    s_d >= 2: KL between the true posterior (from E_0) and the predicted
    posterior (from the network's E0_hat). s_d == 1: negative
    log-likelihood of the true category under E0_hat, floored at 1e-12.
    """
    global _clamp_events
    if s_d < 1:
        raise ValueError(f"step {s_d} must be >= 1")
    tensor_mode = isinstance(E0_hat_probs, E.Tensor)
    if s_d == 1:
        hat_v = E0_hat_probs.v if tensor_mode else np.asarray(E0_hat_probs)
        hit = (np.asarray(E0_onehot) > 0) & (hat_v < LOG_CLAMP)
        if np.any(hit):
            _clamp_events += int(hit.sum())
        if tensor_mode:
            logp = E.log(E.maximum_const(E0_hat_probs, LOG_CLAMP))
            nll = E.neg(E.sum_axis(E.mul(E.tensor(np.asarray(E0_onehot, dtype=hat_v.dtype)), logp),
                                   axis=-1, keepdims=False))
            return E.mean(nll)
        logp = np.log(np.maximum(hat_v, LOG_CLAMP))
        return float(-(np.asarray(E0_onehot) * logp).sum(axis=-1).mean())
    p_true = theta_post(np.asarray(E_s_onehot), np.asarray(E0_onehot), s_d, disc)
    q_pred = theta_post(E_s_onehot, E0_hat_probs, s_d, disc)
    kl = kl_categorical(p_true, q_pred)
    if tensor_mode:
        return E.mean(kl)
    return float(np.mean(kl))


def sample_posterior(E_s_onehot: np.ndarray, E0_hat_probs: np.ndarray, s_d: int,
                     rng: np.random.Generator, disc: Schedule) -> np.ndarray:
    """One reverse draw: from the plugged-in posterior for s_d >= 2, from
    Cat(E0_hat) directly at the final step."""
    if s_d < 1:
        raise ValueError(f"step {s_d} must be >= 1")
    if s_d == 1:
        probs = np.asarray(E0_hat_probs, dtype=np.float64)
        probs = probs / probs.sum(axis=-1, keepdims=True)
    else:
        probs = theta_post(np.asarray(E_s_onehot), np.asarray(E0_hat_probs), s_d, disc)
    return _draw_rows(probs, rng)


def transition_matrix(s_d: int, N: int, disc: Schedule) -> np.ndarray:
    """Single-step forward kernel Q[i, j] = q(E_s = j | E_{s-1} = i)."""
    beta = disc.beta[s_d - 1]
    return (1.0 - beta) * np.eye(N) + beta / N
