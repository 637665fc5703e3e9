"""Synthetic keep-away scenes with ground-truth possession.

Players wander as smoothed random walks (heading diffusion, reflecting
field bounds, soft mutual repulsion). The ball either rides with a
possessor at a jittered offset inside the possession radius, or flies in
an exactly straight line toward a receiver who runs to meet it. Event
labels are produced by the same closest-player-within-radius rule the
extraction heuristic uses, so the heuristic recovers them by construction,
and controlled segments curve while free flight does not, which is what
the threshold analysis keys on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .guidance import dense_caption, extract_possessor, extract_wpg
from .scene import Scene, SceneMeta, save_bundle

MIN_PLAYER_SPACING = 3.0
OFFSET_MAX_FRACTION = 0.97  # of possession radius
BOUNDS_MARGIN = 0.5


@dataclass(frozen=True)
class PlaygroundConfig:
    N: int = 4                      # ball + 3 players
    T: int = 20
    fps: float = 5.0
    field_extent: tuple[float, float] = (20.0, 12.0)
    units: str = "meters"
    possession_radius: float = 1.5
    pass_speed: tuple[float, float] = (10.0, 13.0)   # m/s
    player_speed: tuple[float, float] = (1.0, 3.0)   # m/s
    possession_dwell: tuple[int, int] = (3, 6)       # frames

    def __post_init__(self):
        if self.possession_radius <= 0:
            raise ValueError("possession radius must be positive")
        if self.possession_dwell[0] < 1:
            raise ValueError("dwell must be at least one frame")


def _reflect(pos: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Fold a point back into [lo, hi] by mirror reflection."""
    span = hi - lo
    p = np.mod(pos - lo, 2 * span)
    p = np.where(p > span, 2 * span - p, p)
    return lo + p


def generate_scene(config: PlaygroundConfig, rng: np.random.Generator) -> Scene:
    ext = np.asarray(config.field_extent)
    lo = np.full(2, BOUNDS_MARGIN)
    hi = ext - BOUNDS_MARGIN
    n_players = config.N - 1
    dt = 1.0 / config.fps
    radius = config.possession_radius
    offset_max = radius * OFFSET_MAX_FRACTION

    # initial placement with minimum spacing
    players = np.empty((n_players, 2))
    for i in range(n_players):
        for _ in range(200):
            cand = rng.uniform(lo, hi)
            if all(np.linalg.norm(cand - players[j]) >= MIN_PLAYER_SPACING
                   for j in range(i)):
                break
        players[i] = cand
    headings = rng.uniform(0, 2 * np.pi, size=n_players)
    speeds = rng.uniform(*config.player_speed, size=n_players)

    possessor = int(rng.integers(1, config.N))
    offset = rng.normal(size=2) * 0.2
    offset *= min(1.0, offset_max / max(np.linalg.norm(offset), 1e-9))
    ball = players[possessor - 1] + offset
    dwell = int(rng.integers(config.possession_dwell[0],
                             config.possession_dwell[1] + 1))
    flight_vel = None
    receiver = 0  # player index the ball is flying toward (0 = none)

    Y = np.empty((config.T, config.N, 2))

    def record(t):
        Y[t, 0] = ball
        Y[t, 1:] = players

    max_player_step = config.player_speed[1] * dt

    def fresh_dwell():
        return int(rng.integers(config.possession_dwell[0],
                                config.possession_dwell[1] + 1))

    record(0)
    for t in range(1, config.T):
        # players drift; the designated receiver runs toward the ball
        headings += rng.normal(scale=0.5, size=n_players)
        speeds = np.clip(speeds + rng.normal(scale=0.3, size=n_players),
                         *config.player_speed)
        step = np.stack([np.cos(headings), np.sin(headings)], axis=1) \
            * (speeds * dt)[:, None]
        if flight_vel is not None and receiver >= 1:
            to_ball = ball - players[receiver - 1]
            dist = np.linalg.norm(to_ball)
            if dist > 1e-9:
                step[receiver - 1] = to_ball / dist * max_player_step
        players = _reflect(players + step, lo, hi)
        # soft repulsion keeps rival players out of the possession radius
        for i in range(n_players):
            for j in range(i + 1, n_players):
                gap = players[i] - players[j]
                d = np.linalg.norm(gap)
                if d < MIN_PLAYER_SPACING and d > 1e-9:
                    push = gap / d * (MIN_PLAYER_SPACING - d) / 2
                    players[i] = _reflect(players[i] + push, lo, hi)
                    players[j] = _reflect(players[j] - push, lo, hi)

        if flight_vel is None:
            # possessed: ball follows the carrier at a wandering offset
            offset = offset + rng.normal(scale=0.35, size=2)
            norm = np.linalg.norm(offset)
            if norm > offset_max:
                offset *= offset_max / norm
            ball = players[possessor - 1] + offset
        else:
            nxt = ball + flight_vel
            if np.any(nxt < 0.1) or np.any(nxt > ext - 0.1):
                # park at the edge of play (zero velocity) until picked up
                flight_vel = np.zeros(2)
            else:
                ball = nxt

        record(t)
        label = int(extract_possessor(Y[t:t + 1], radius)[0])
        if flight_vel is None:
            if label != possessor and label != 0:
                possessor = label  # stolen by a closer player
                offset = ball - players[possessor - 1]
                dwell = fresh_dwell()
            else:
                dwell -= 1
                if dwell <= 0:
                    # try to release a pass; hold until the release point
                    # guarantees the ball clears the carrier next frame
                    choices = [i for i in range(1, config.N) if i != possessor]
                    cand = int(rng.choice(choices))
                    direction = players[cand - 1] - ball
                    dist = np.linalg.norm(direction)
                    if dist > 1e-9:
                        vel = direction / dist * rng.uniform(*config.pass_speed) * dt
                        if np.linalg.norm(offset + vel) >= radius + max_player_step + 0.1:
                            flight_vel = vel
                            receiver = cand
        elif label != 0:
            possessor = label
            offset = ball - players[possessor - 1]
            dwell = fresh_dwell()
            flight_vel = None
            receiver = 0

    E = extract_possessor(Y, radius)
    meta = SceneMeta(T=config.T, N=config.N, fps=config.fps, units=config.units,
                     field_extent=(float(ext[0]), float(ext[1])),
                     dataset_tag="playground")
    return Scene(Y=Y, E=E, meta=meta)


def generate_dataset(config: PlaygroundConfig, n_scenes: int, seed: int,
                     out_dir, with_guidance: bool = True) -> list[Path]:
    """Write ``n_scenes`` bundles plus a manifest; fully seed-determined."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_scenes):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        scene = generate_scene(config, rng)
        caption = wpg = None
        if with_guidance:
            wpg = extract_wpg(scene.E)
            caption = dense_caption(scene).text
        paths.append(save_bundle(scene, out / f"scene_{i:05d}",
                                 caption=caption, wpg=wpg))
    manifest = {
        "seed": seed,
        "n_scenes": n_scenes,
        "config": {
            "N": config.N, "T": config.T, "fps": config.fps,
            "field_extent": list(config.field_extent), "units": config.units,
            "possession_radius": config.possession_radius,
            "pass_speed": list(config.pass_speed),
            "player_speed": list(config.player_speed),
            "possession_dwell": list(config.possession_dwell),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1),
                                       encoding="utf-8")
    return paths


def constant_velocity_baseline(Y: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Complete the unobserved region by extrapolating each agent's last
    observed velocity; with a trailing observed frame, interpolate linearly
    to it instead. Needs at least two leading observed frames per agent."""
    T, N = M.shape
    out = Y.copy()
    for n in range(N):
        obs = np.flatnonzero(M[:, n] > 0)
        lead = 0
        while lead < len(obs) and obs[lead] == lead:
            lead += 1
        if lead < 2:
            raise ValueError(f"agent {n}: need >= 2 leading observed frames")
        t0 = lead - 1
        v = Y[t0, n] - Y[t0 - 1, n]
        tail = obs[obs > t0]
        if tail.size:
            t1 = int(tail[0])
            for t in range(t0 + 1, t1):
                w = (t - t0) / (t1 - t0)
                out[t, n] = (1 - w) * Y[t0, n] + w * Y[t1, n]
        else:
            for t in range(t0 + 1, T):
                out[t, n] = Y[t0, n] + v * (t - t0)
    return out
