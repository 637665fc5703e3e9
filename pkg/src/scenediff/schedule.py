"""Variance schedule shared by both modalities, plus step alignment.

The continuous chain runs over ``S`` steps; the categorical chain runs
over a reduced ``S_d`` steps built from the same endpoints, and each
continuous step maps onto a categorical step via ``ceil(s * S_d / S)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_S = 50
DEFAULT_S_D = 10
DEFAULT_ZETA = 5
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.5


@dataclass(frozen=True)
class Schedule:
    """Precomputed beta/alpha arrays for one chain.

    ``beta[s-1]`` is the step-s variance increment; ``alpha_bar`` has
    length ``S + 1`` with ``alpha_bar[0] == 1`` so closed-form posteriors
    can index step 0 directly.
    """

    S: int
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        alpha = 1.0 - self.beta
        abar = np.concatenate([[1.0], np.cumprod(alpha)])
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", abar)
        self.beta.setflags(write=False)
        alpha.setflags(write=False)
        abar.setflags(write=False)


def build_quadratic(beta_min: float = DEFAULT_BETA_MIN,
                    beta_max: float = DEFAULT_BETA_MAX,
                    steps: int = DEFAULT_S) -> Schedule:
    """Quadratic schedule: linear in sqrt(beta) between the two endpoints.

    beta_1 == beta_min and beta_S == beta_max exactly.
    """
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ValueError(
            f"need 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})"
        )
    if steps < 2:
        raise ValueError(f"need at least 2 steps, got {steps}")
    lo, hi = math.sqrt(beta_min), math.sqrt(beta_max)
    root = lo + (np.arange(steps) / (steps - 1)) * (hi - lo)
    return Schedule(S=steps, beta=root * root)


def align_discrete_step(s: int, S: int, S_d: int) -> int:
    """Map a continuous step onto the reduced categorical chain."""
    if not 1 <= s <= S:
        raise ValueError(f"step {s} outside [1, {S}]")
    return math.ceil(s * S_d / S)


def ddim_step_list(S: int = DEFAULT_S, zeta: int = DEFAULT_ZETA,
                   extra_step_at_one: bool = True) -> list[int]:
    """Descending step list S, S-zeta, ..., zeta, [1,] 0.

    The sampler makes one network pass per consecutive pair, so the
    default (50, 5, True) costs 11 passes.
    """
    if zeta < 1 or S % zeta != 0:
        raise ValueError(f"zeta={zeta} must divide S={S}")
    steps = list(range(S, 0, -zeta))
    if extra_step_at_one and steps[-1] != 1:
        steps.append(1)
    steps.append(0)
    return steps


@dataclass(frozen=True)
class JointSchedule:
    """Continuous schedule plus its reduced categorical counterpart."""

    cont: Schedule
    disc: Schedule
    S: int
    S_d: int

    def align(self, s: int) -> int:
        return align_discrete_step(s, self.S, self.S_d)


def build_joint(beta_min: float = DEFAULT_BETA_MIN,
                beta_max: float = DEFAULT_BETA_MAX,
                S: int = DEFAULT_S, S_d: int = DEFAULT_S_D) -> JointSchedule:
    """Build the shared schedule pair.

    The categorical chain is a fresh quadratic build over S_d steps with
    the same endpoints, not a subsample of the continuous arrays.
    """
    if not 1 <= S_d <= S:
        raise ValueError(f"need 1 <= S_d <= S, got S_d={S_d}, S={S}")
    cont = build_quadratic(beta_min, beta_max, S)
    if S_d == S:
        disc = cont
    elif S_d == 1:
        disc = Schedule(S=1, beta=np.array([beta_max]))
    else:
        disc = build_quadratic(beta_min, beta_max, S_d)
    return JointSchedule(cont=cont, disc=disc, S=S, S_d=S_d)
