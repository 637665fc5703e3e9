"""Training loop: joint objective, step importance sampling, condition
dropout, and the optimizer.

The objective couples the two heads: mean squared noise error on the
generated region of the trajectories plus ``lambda`` times the exact
variational term of the event channel, evaluated at the aligned reduced
step. Diffusion steps are drawn by loss-aware importance sampling with an
unbiasedness reweighting; guidance conditions are dropped at random so one
network serves conditional and unconditional passes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from . import gaussian, multinomial
from .denoiser import Denoiser
from .scene import Guidance, event_indicator, observed_state
from .schedule import JointSchedule

HISTORY_PER_STEP = 10
PROB_FLOOR_SCALE = 1e-3


@dataclass
class TrainConfig:
    lambda_vb: float = 0.1
    cfg_dropout: float = 0.25
    lr: float = 1e-3
    halve_every: int = 20
    epochs: int = 100
    batch: int = 16
    task: str = "future"
    t_obs: int = 10
    guidance_mode: str = "none"
    loss_on_observed: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lambda_vb < 0:
            raise ValueError("lambda must be non-negative")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ValueError("cfg_dropout must lie in [0, 1]")


class ImportanceState:
    """Loss-history-driven distribution over diffusion steps.

    Uniform until every step has a full ring buffer of recent losses;
    afterwards p_s is proportional to sqrt(mean of squared history),
    floored and renormalized. The returned weight 1/(S p_s) keeps the
    loss estimator unbiased.
    """

    def __init__(self, S: int):
        self.S = S
        self.history = np.zeros((S, HISTORY_PER_STEP))
        self.counts = np.zeros(S, dtype=np.int64)
        self.cursor = np.zeros(S, dtype=np.int64)

    @property
    def warm(self) -> bool:
        return bool(np.all(self.counts >= HISTORY_PER_STEP))

    def update(self, s: int, loss_value: float):
        i = s - 1
        self.history[i, self.cursor[i]] = loss_value
        self.cursor[i] = (self.cursor[i] + 1) % HISTORY_PER_STEP
        self.counts[i] = min(self.counts[i] + 1, HISTORY_PER_STEP)

    def probabilities(self) -> np.ndarray:
        if not self.warm:
            return np.full(self.S, 1.0 / self.S)
        w = np.sqrt((self.history ** 2).mean(axis=1))
        total = w.sum()
        if total <= 0:
            return np.full(self.S, 1.0 / self.S)
        p = w / total
        p = np.maximum(p, PROB_FLOOR_SCALE / self.S)
        return p / p.sum()

    def sample(self, rng: np.random.Generator) -> tuple[int, float]:
        p = self.probabilities()
        s = int(rng.choice(self.S, p=p)) + 1
        return s, float(1.0 / (self.S * p[s - 1]))


def cfg_dropout(g: Guidance, p: float, rng: np.random.Generator) -> Guidance:
    """Drop the condition with probability p (classifier-free training)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    if g is None:
        return None
    return None if rng.random() < p else g


def joint_loss(eps: np.ndarray, eps_hat: E.Tensor, E0: np.ndarray,
               E_s_onehot: np.ndarray, E0_hat: E.Tensor, s: int,
               M: np.ndarray, lambda_vb: float, sched: JointSchedule,
               loss_on_observed: bool = False):
    """Total objective for one scene plus its two components.

    Continuous: squared noise error over the generated (M = 0) region, or
    everywhere when ``loss_on_observed``. Discrete: variational term at the
    aligned reduced step, over timesteps with at least one generated agent.
    Returns (total, continuous, discrete) engine scalars.
    """
    N = M.shape[-1]
    loss_mask = np.ones_like(M) if loss_on_observed else 1.0 - M
    l_y = gaussian.simple_loss(eps, eps_hat, loss_mask)
    s_d = sched.align(s)
    rows = np.flatnonzero((M == 0).any(axis=-1))
    if rows.size == 0:
        raise ValueError("no generated timesteps for the event loss")
    E0_rows = event_indicator(E0, N)[rows]
    Es_rows = E_s_onehot[rows]
    hat_rows = E.gather(E0_hat, rows, axis=0)
    l_e = multinomial.discrete_vb_term(s_d, E0_rows, Es_rows, hat_rows, sched.disc)
    total = E.add(l_y, E.mul(l_e, lambda_vb))
    return total, l_y, l_e


class Adam:
    """Adaptive-moment optimizer over named parameter tensors."""

    def __init__(self, params: list[tuple[str, E.Tensor]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.v) for name, p in params}
        self.v = {name: np.zeros_like(p.v) for name, p in params}
        self.t = 0

    def step(self, grads: dict[int, np.ndarray], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = grads[id(p)]
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            p.v = p.v - lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def lr_at_epoch(base_lr: float, epoch: int, halve_every: int) -> float:
    """Learning rate for a 1-based epoch index; halved every halve_every."""
    return base_lr * (0.5 ** ((epoch - 1) // halve_every))


@dataclass
class TrainItem:
    """One preprocessed training example (normalized coordinates)."""

    Y0: np.ndarray      # [T, N, 2] in [-1, 1]
    E0: np.ndarray      # [T]
    M: np.ndarray       # [T, N]
    X_co: np.ndarray    # [T, N, 3]
    guidance: Guidance


def train_epoch(items: list[TrainItem], model: Denoiser, opt: Adam,
                imp: ImportanceState, config: TrainConfig,
                sched: JointSchedule, epoch: int,
                rng: np.random.Generator) -> dict:
    """One pass over the dataset; returns the epoch report."""
    order = rng.permutation(len(items))
    lr = lr_at_epoch(config.lr, epoch, config.halve_every)
    names = model.named_params()
    params = [p for _, p in names]
    sums = {"joint": 0.0, "continuous": 0.0, "discrete": 0.0}
    n_batches = 0
    for start in range(0, len(order), config.batch):
        batch = [items[i] for i in order[start:start + config.batch]]
        B = len(batch)
        T, N = batch[0].M.shape
        xs = np.empty((B, T, N, 3))
        xco = np.empty((B, T, N, 3))
        masks = np.empty((B, T, N))
        steps = np.empty(B, dtype=np.int64)
        weights = np.empty(B)
        eps_list, es_list, guid = [], [], []
        for b, item in enumerate(batch):
            s, w = imp.sample(rng)
            eps = rng.standard_normal(item.Y0.shape)
            y_s = gaussian.q_sample_continuous(item.Y0, s, eps, sched.cont)
            e0_onehot = event_indicator(item.E0, N)
            e_s = multinomial.q_sample_categorical(
                e0_onehot, sched.align(s), rng, sched.disc)
            xs[b] = np.concatenate([y_s, e_s[..., None]], axis=-1)
            xco[b] = item.X_co
            masks[b] = item.M
            steps[b] = s
            weights[b] = w
            eps_list.append(eps)
            es_list.append(e_s)
            guid.append(cfg_dropout(item.guidance, config.cfg_dropout, rng))

        eps_hat, e0_hat = model.forward(xs, xco, masks, steps, guid)
        terms = []
        comp_y = np.empty(B)
        comp_e = np.empty(B)
        for b, item in enumerate(batch):
            eh = E.reshape(E.slice_axis(eps_hat, 0, b, b + 1), (T, N, 2))
            ph = E.reshape(E.slice_axis(e0_hat, 0, b, b + 1), (T, N))
            total, l_y, l_e = joint_loss(
                eps_list[b], eh, item.E0, es_list[b], ph, int(steps[b]),
                item.M, config.lambda_vb, sched, config.loss_on_observed)
            terms.append(E.mul(total, weights[b] / B))
            comp_y[b] = float(l_y.v)
            comp_e[b] = float(l_e.v)
        loss = terms[0]
        for term in terms[1:]:
            loss = E.add(loss, term)
        if not np.isfinite(loss.v):
            raise E.NumericsError(
                f"non-finite loss at epoch {epoch} batch {n_batches} "
                f"(continuous={comp_y.tolist()}, discrete={comp_e.tolist()})")
        grads = E.backward(loss, params)
        opt.step(grads, lr)
        for b in range(B):
            imp.update(int(steps[b]), comp_y[b])
        sums["joint"] += float(loss.v)
        sums["continuous"] += comp_y.mean()
        sums["discrete"] += comp_e.mean()
        n_batches += 1
    return {
        "epoch": epoch,
        "lr": lr,
        "batches": n_batches,
        "mean_weighted_loss": sums["joint"] / max(n_batches, 1),
        "mean_continuous": sums["continuous"] / max(n_batches, 1),
        "mean_discrete": sums["discrete"] / max(n_batches, 1),
        "importance_warm": imp.warm,
    }


def prepare_items(scenes, masks, guidances) -> list[TrainItem]:
    """Normalize scenes and assemble network-ready training examples."""
    from .scene import normalize
    items = []
    for scene, mask, g in zip(scenes, masks, guidances):
        y0 = normalize(scene.Y, scene.meta.field_extent)
        items.append(TrainItem(
            Y0=y0, E0=scene.E, M=mask.M,
            X_co=observed_state(y0, scene.E, mask.M), guidance=g))
    return items


def train(items: list[TrainItem], model: Denoiser, config: TrainConfig,
          sched: JointSchedule, log_path=None) -> list[dict]:
    """Full training run; optionally appends one JSON line per epoch."""
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.named_params())
    imp = ImportanceState(sched.S)
    reports = []
    log_file = Path(log_path).open("a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            report = train_epoch(items, model, opt, imp, config, sched, epoch, rng)
            reports.append(report)
            if log_file:
                log_file.write(json.dumps(report, sort_keys=True) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    return reports
