"""Inference: hybrid reverse process producing K independent completions.

Trajectories follow the deterministic multi-jump update; events follow the
stochastic categorical sampler on the reduced chain, stepping only when
the aligned step actually changes. Each mode owns an independent RNG
stream derived from (seed, mode index); the K modes share each network
pass as one batch. Observed entries are overwritten with the conditioning
values at the end, then coordinates return to native units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from . import gaussian, multinomial
from .denoiser import Denoiser
from .scene import (Guidance, Mask, Scene, denormalize, event_indicator,
                    normalize, observed_state)
from .schedule import JointSchedule


@dataclass(frozen=True)
class SampleRequest:
    scene: Scene            # provides the observations and metadata
    mask: Mask
    guidance: Guidance = None
    modes: int = 20
    seed: int = 0
    step_list: tuple[int, ...] = ()

    def __post_init__(self):
        if self.modes < 1:
            raise ValueError("need at least one mode")
        steps = self.step_list
        if not steps or steps[-1] != 0 or any(a <= b for a, b in zip(steps, steps[1:])):
            raise ValueError("step list must descend strictly and end at 0")


@dataclass(frozen=True)
class ModeSet:
    scenes: list[Scene]          # completed scenes, native units
    event_probs: np.ndarray      # [K, T, N] final clean-event probabilities
    mode_seeds: list[tuple[int, int]]
    step_list: tuple[int, ...]
    entropy_bits: np.ndarray | None = None  # per network pass, when recorded


def per_mode_rng(seed: int, mode_index: int) -> np.random.Generator:
    """Independent, reproducible stream for one mode."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(mode_index,)))


def attention_entropy_bits(probs: np.ndarray) -> float:
    """Mean Shannon entropy (base 2) of attention rows: -sum p log2 p."""
    p = np.clip(probs, 1e-30, 1.0)
    return float(-(p * np.log2(p)).sum(axis=-1).mean())


def sample(model: Denoiser, request: SampleRequest, sched: JointSchedule,
           record_entropy: bool = False) -> ModeSet:
    """Generate ``modes`` completions of the request's scene."""
    scene, mask = request.scene, request.mask
    K = request.modes
    T, N = scene.meta.T, scene.meta.N
    extent = scene.meta.field_extent
    y_norm = normalize(scene.Y, extent)
    x_co = observed_state(y_norm, scene.E, mask.M)
    pairs = list(zip(request.step_list[:-1], request.step_list[1:]))

    rngs = [per_mode_rng(request.seed, k) for k in range(K)]
    y = np.stack([rngs[k].standard_normal((T, N, 2)) for k in range(K)])
    e_onehot = np.stack([event_indicator(rngs[k].integers(0, N, size=T), N)
                         for k in range(K)])
    probs = np.full((K, T, N), 1.0 / N)
    x_co_b = np.broadcast_to(x_co, (K, T, N, 3))
    mask_b = np.broadcast_to(mask.M, (K, T, N))
    guidance = [request.guidance] * K
    entropy = np.zeros(len(pairs)) if record_entropy else None

    for i, (s, s_next) in enumerate(pairs):
        x_s = np.concatenate([y, e_onehot[..., None]], axis=-1)
        sink = [] if record_entropy else None
        with E.no_grad():
            eps_hat, e0_hat = model.forward(
                x_s, x_co_b, mask_b, s, guidance, sink=sink)
        eps_hat_v, probs = eps_hat.v, e0_hat.v
        if not (np.all(np.isfinite(eps_hat_v)) and np.all(np.isfinite(probs))):
            raise E.NumericsError(f"non-finite network output at step {s}")
        if record_entropy:
            entropy[i] = sum(attention_entropy_bits(p) for p in sink) / len(sink)
        y = gaussian.ddim_update(y, eps_hat_v, s, s_next, sched.cont)
        if not np.all(np.isfinite(y)):
            raise E.NumericsError(f"non-finite trajectory state after step {s}")
        s_d = sched.align(s)
        s_d_next = sched.align(s_next) if s_next >= 1 else 0
        if s_d_next == s_d:
            continue  # several continuous jumps share one reduced step
        step_d = s_d if s_d >= 2 else 1
        e_onehot = np.stack([
            multinomial.sample_posterior(e_onehot[k], probs[k], step_d,
                                         rngs[k], sched.disc)
            for k in range(K)])

    # hard consistency with the observations, then back to native units
    obs = mask.M[..., None] > 0
    observed_rows = mask.M.all(axis=1) > 0
    out_scenes = []
    for k in range(K):
        y_k = np.where(obs, y_norm, y[k])
        e_k = np.where(observed_rows, scene.E, e_onehot[k].argmax(axis=1))
        out_scenes.append(Scene(Y=denormalize(y_k, extent), E=e_k, meta=scene.meta))
    return ModeSet(scenes=out_scenes, event_probs=probs.copy(),
                   mode_seeds=[(request.seed, k) for k in range(K)],
                   step_list=tuple(request.step_list), entropy_bits=entropy)
