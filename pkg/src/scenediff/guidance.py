"""Deriving events and guidance signals from raw trajectories.

Possession comes from a geometric rule: the closest player within a
distance threshold holds the ball, otherwise the ball itself (category 0)
is the possessor. The threshold is recoverable from data by measuring how
straight the ball travels when nobody is within a candidate distance.
From the event track we derive the possessor-sequence guidance signal,
deterministic template captions, and (stub) text embeddings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .scene import Scene, WpgGuidance

POSSESSION_THRESHOLD = 1.5
TIE_EPS = 1e-9
TEXT_DIM = 768


def extract_possessor(Y: np.ndarray, threshold: float = POSSESSION_THRESHOLD) -> np.ndarray:
    """Per-timestep possessor indices from native-unit trajectories.

    The closest player within ``threshold`` of the ball possesses it; ties
    within 1e-9 go to the lowest player index; no player in range means
    category 0 (ball in flight).
    """
    ball = Y[:, :1, :]
    if Y.shape[1] < 2:
        return np.zeros(Y.shape[0], dtype=np.int64)
    dists = np.linalg.norm(Y[:, 1:, :] - ball, axis=-1)  # [T, N-1]
    best = (dists <= dists.min(axis=1, keepdims=True) + TIE_EPS).argmax(axis=1)
    E = best + 1
    E[dists[np.arange(len(E)), best] > threshold] = 0
    return E.astype(np.int64)


@dataclass(frozen=True)
class ThresholdReport:
    thresholds: np.ndarray
    mean_angle_change: np.ndarray  # radians; NaN where no qualifying frames
    frame_counts: np.ndarray
    argmin_threshold: float

    def to_dict(self) -> dict:
        return {
            "thresholds": [float(v) for v in self.thresholds],
            "mean_angle_change": [None if np.isnan(v) else float(v)
                                  for v in self.mean_angle_change],
            "frame_counts": [int(v) for v in self.frame_counts],
            "argmin_threshold": float(self.argmin_threshold),
        }


ANGLE_TIE_TOL = 1e-6  # below the straightness guarantee of free flight


def analyze_threshold(scenes: list[Scene], d_min: float = 0.0, d_max: float = 3.0,
                      step: float = 0.1) -> ThresholdReport:
    """Sweep candidate distances; for each, average the turn angle of the
    ball over frames where it is farther than the candidate from every
    player. The distance minimizing the average marks where ball motion
    becomes most linear, i.e. free of player influence.

    Zero-velocity frames are skipped (undefined angle). Candidates with no
    qualifying frames are reported as missing and excluded from the argmin.
    Means within 1e-6 rad of the minimum count as ties (that is the noise
    scale of straight flight) and the smallest tied distance wins.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    cands = np.round(np.arange(d_min, d_max + step / 2, step), 10)
    sums = np.zeros(len(cands))
    counts = np.zeros(len(cands), dtype=np.int64)
    for scene in scenes:
        Y = scene.Y
        if Y.shape[0] < 3:
            continue
        ball = Y[:, 0, :]
        clearance = np.linalg.norm(Y[:, 1:, :] - ball[:, None, :], axis=-1).min(axis=1)
        v = np.diff(ball, axis=0)  # v[t] = ball[t+1] - ball[t]
        speed = np.linalg.norm(v, axis=-1)
        # angle at frame t between the step arriving at t and the one leaving
        ok = (speed[:-1] > 1e-12) & (speed[1:] > 1e-12)
        cross = v[:-1, 0] * v[1:, 1] - v[:-1, 1] * v[1:, 0]
        dot = (v[:-1] * v[1:]).sum(-1)
        ang = np.abs(np.arctan2(cross, dot))
        clr = clearance[1:-1]
        for i, d in enumerate(cands):
            sel = ok & (clr > d)
            sums[i] += ang[sel].sum()
            counts[i] += int(sel.sum())
    means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    if np.all(np.isnan(means)):
        raise ValueError("no qualifying frames at any candidate threshold")
    tied = means <= np.nanmin(means) + ANGLE_TIE_TOL
    argmin = float(cands[np.argmax(tied)])
    return ThresholdReport(thresholds=cands, mean_angle_change=means,
                           frame_counts=counts, argmin_threshold=argmin)


def extract_wpg(E: np.ndarray) -> list[int]:
    """Possessor sequence: drop the no-possessor frames, then collapse
    consecutive duplicates. [1,1,0,0,3,3] -> [1,3]; all-zero -> []."""
    seq = [int(v) for v in E if v != 0]
    out: list[int] = []
    for v in seq:
        if not out or out[-1] != v:
            out.append(v)
    return out


def encode_wpg(seq: list[int], N: int) -> WpgGuidance:
    """One-hot [L, N] with row i hot at seq[i]; entries must be players."""
    onehot = np.zeros((len(seq), N), dtype=np.float64)
    for i, v in enumerate(seq):
        if not 1 <= v < N:
            raise ValueError(f"possessor index {v} outside [1, {N - 1}]")
        onehot[i, v] = 1.0
    return WpgGuidance(onehot=onehot)


def decode_wpg(g: WpgGuidance) -> list[int]:
    return [int(v) for v in g.indices]


# ---------------------------------------------------------------------------
# zone grids and dense captions
# ---------------------------------------------------------------------------

_COLS = ("left", "left-center", "center", "right-center", "right")
_ROWS = ("down", "middle", "up")


@dataclass(frozen=True)
class ZoneGrid:
    """Named partition of the field; soccer-style 5x3 grid by default."""

    kind: str = "grid"  # "grid" | "yards"

    def name(self, xy, extent) -> str:
        x, y = float(xy[0]), float(xy[1])
        ex, ey = float(extent[0]), float(extent[1])
        if self.kind == "yards":
            half = "L" if x <= ex / 2 else "R"
            dist = x if half == "L" else ex - x
            yard = int(round((dist / (ex / 2)) * 50 / 5)) * 5
            return f"yard {half} {yard}"
        col = min(int(np.clip(x / ex, 0, 1 - 1e-9) * 5), 4)
        row = min(int(np.clip(y / ey, 0, 1 - 1e-9) * 3), 2)
        col_name, row_name = _COLS[col], _ROWS[row]
        if col in (0, 4):
            if row == 1:
                return "box"
            return f"{row_name}-corner"
        if row == 1:
            return col_name
        return f"{row_name}-side"


@dataclass(frozen=True)
class DenseCaption:
    text: str
    event_list: tuple[tuple[int, str, str], ...]  # (actor, verb, zone)


def _home_cutoff(N: int) -> int:
    """Highest player index counted as home (home listed before away)."""
    return (N - 1 + 1) // 2


def _segments(E: np.ndarray) -> list[tuple[int, int, int]]:
    """Runs of constant possessor: (value, start, stop_exclusive)."""
    out = []
    start = 0
    for t in range(1, len(E) + 1):
        if t == len(E) or E[t] != E[start]:
            out.append((int(E[start]), start, t))
            start = t
    return out


def dense_caption(scene: Scene, E: np.ndarray | None = None,
                  zone_grid: ZoneGrid | None = None) -> DenseCaption:
    """Deterministic rule-based summary of the possession play.

    One team sentence, then chronological possession and transition
    sentences with ball zones drawn from the grid. Identical inputs give
    byte-identical text.
    """
    E = scene.E if E is None else np.asarray(E)
    grid = zone_grid or ZoneGrid()
    extent = scene.meta.field_extent
    ball = scene.Y[:, 0, :]
    segs = _segments(E)
    home_cut = _home_cutoff(scene.meta.N)

    possessors = [v for v, _, _ in segs if v != 0]
    if possessors:
        home_frames = sum(stop - start for v, start, stop in segs
                          if v != 0 and v <= home_cut)
        total = sum(stop - start for v, start, stop in segs if v != 0)
        team = "Home Team" if home_frames * 2 >= total else "Away Team"
        sentences = [f"{team} has the possession."]
    else:
        sentences = ["No player takes possession."]

    events: list[tuple[int, str, str]] = []
    if segs and segs[0][0] == 0:
        z = grid.name(ball[0], extent)
        sentences.append(f"The ball starts at {z} without a carrier.")
        events.append((0, "start", z))

    prev_possessor = None
    for v, start, stop in segs:
        z_in = grid.name(ball[start], extent)
        z_out = grid.name(ball[stop - 1], extent)
        if v == 0:
            if start > 0 and z_in != z_out:
                sentences.append(f"The ball moves from {z_in} to {z_out}.")
                events.append((0, "move", z_out))
            continue
        if prev_possessor is None:
            sentences.append(f"Player {v} possesses the ball at {z_in}.")
        else:
            sentences.append(f"Player {prev_possessor} passes to Player {v} "
                             f"who possesses the ball at {z_in}.")
            events.append((prev_possessor, "pass", z_in))
        events.append((v, "possess", z_in))
        if z_out != z_in:
            sentences.append(f"Player {v} moves the ball from {z_in} to {z_out}.")
            events.append((v, "move", z_out))
        prev_possessor = v

    return DenseCaption(text=" ".join(sentences), event_list=tuple(events))


# ---------------------------------------------------------------------------
# text embeddings: deterministic stub + precomputed ingestion
# ---------------------------------------------------------------------------

def _token_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(),
                          "little")
    vec = np.random.default_rng(seed).standard_normal(dim)
    return vec / np.linalg.norm(vec)


def tokenize(text: str) -> list[str]:
    out, cur = [], []
    for ch in text.lower():
        if ch.isalnum():
            cur.append(ch)
        elif cur:
            out.append("".join(cur))
            cur = []
    if cur:
        out.append("".join(cur))
    return out


def embed_text(text: str, dim: int = TEXT_DIM) -> np.ndarray:
    """Deterministic per-token unit-norm pseudo-random embeddings [L, dim].

    A stand-in for a frozen pretrained encoder: same text always yields the
    same matrix, distinct tokens get near-orthogonal rows. Precomputed real
    embeddings can be supplied instead via the textemb file format.
    """
    tokens = tokenize(text)
    if not tokens:
        raise ValueError("cannot embed empty text")
    return np.stack([_token_vector(tok, dim) for tok in tokens])
