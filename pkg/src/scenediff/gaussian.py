"""Closed-form continuous diffusion on normalized trajectories.

Forward corruption, the reverse posterior mean in the noise
parametrization, the deterministic multi-jump update used at inference,
and the simplified regression objective. All array math is plain numpy;
only the loss participates in gradients.
"""

from __future__ import annotations

import numpy as np

from . import engine as E
from .schedule import Schedule


def q_sample_continuous(Y0: np.ndarray, s: int, eps: np.ndarray,
                        sched: Schedule) -> np.ndarray:
    """Y_s = sqrt(abar_s) Y0 + sqrt(1 - abar_s) eps."""
    if Y0.shape != eps.shape:
        raise ValueError(f"Y0 shape {Y0.shape} != eps shape {eps.shape}")
    if not 1 <= s <= sched.S:
        raise ValueError(f"step {s} outside [1, {sched.S}]")
    abar = sched.alpha_bar[s]
    return np.sqrt(abar) * Y0 + np.sqrt(1.0 - abar) * eps


def posterior_mean_mu(Y_s: np.ndarray, eps_hat: np.ndarray, s: int,
                      sched: Schedule) -> np.ndarray:
    """mu = (Y_s - beta_s / sqrt(1 - abar_s) * eps_hat) / sqrt(alpha_s)."""
    if not 1 <= s <= sched.S:
        raise ValueError(f"step {s} outside [1, {sched.S}]")
    beta = sched.beta[s - 1]
    return (Y_s - beta / np.sqrt(1.0 - sched.alpha_bar[s]) * eps_hat) \
        / np.sqrt(sched.alpha[s - 1])


def sigma_sq(s: int, sched: Schedule) -> float:
    """Reverse-step variance (1 - abar_{s-1}) / (1 - abar_s) * beta_s."""
    if not 1 <= s <= sched.S:
        raise ValueError(f"step {s} outside [1, {sched.S}]")
    return float((1.0 - sched.alpha_bar[s - 1]) / (1.0 - sched.alpha_bar[s])
                 * sched.beta[s - 1])


def ancestral_step(Y_s: np.ndarray, eps_hat: np.ndarray, s: int,
                   sched: Schedule, rng: np.random.Generator) -> np.ndarray:
    """Stochastic single-step reverse draw (mu + sigma * z); kept for
    parity tests, inference uses the deterministic jump below."""
    mu = posterior_mean_mu(Y_s, eps_hat, s, sched)
    if s == 1:
        return mu
    return mu + np.sqrt(sigma_sq(s, sched)) * rng.standard_normal(Y_s.shape)


def ddim_update(Y_s: np.ndarray, eps_hat: np.ndarray, s: int, s_next: int,
                sched: Schedule) -> np.ndarray:
    """Deterministic jump s -> s_next (s_next may be 0):

    Y' = sqrt(abar'/abar) Y_s + (sqrt(1-abar') - sqrt(abar'/abar) sqrt(1-abar)) eps_hat
    """
    if not 0 <= s_next < s <= sched.S:
        raise ValueError(f"need 0 <= s_next < s <= {sched.S}, got {s_next}, {s}")
    abar, abar_n = sched.alpha_bar[s], sched.alpha_bar[s_next]
    ratio = np.sqrt(abar_n / abar)
    # accumulate in float64: the ratio grows like 1/sqrt(abar_s) and would
    # amplify single-precision rounding in the inputs
    out = ratio * Y_s.astype(np.float64) \
        + (np.sqrt(1.0 - abar_n) - ratio * np.sqrt(1.0 - abar)) \
        * eps_hat.astype(np.float64)
    return out.astype(Y_s.dtype)


def simple_loss(eps: np.ndarray, eps_hat: E.Tensor, loss_mask: np.ndarray) -> E.Tensor:
    """Mean squared noise error over entries selected by ``loss_mask``.

    ``loss_mask`` is [T, N] (or batched [..., T, N]) with 1 marking entries
    that contribute; both coordinate channels of each selected entry count.
    """
    if eps.shape != eps_hat.shape:
        raise ValueError(f"eps shape {eps.shape} != eps_hat shape {eps_hat.shape}")
    mask = np.repeat(np.asarray(loss_mask, dtype=eps.dtype)[..., None], 2, axis=-1)
    count = mask.sum()
    if count == 0:
        raise ValueError("loss mask selects no entries")
    diff = E.sub(eps_hat, E.tensor(eps, dtype=eps.dtype))
    masked = E.mul(diff, E.tensor(mask, dtype=eps.dtype))
    return E.div(E.sum_squared(masked), E.tensor(float(count), dtype=eps.dtype))
