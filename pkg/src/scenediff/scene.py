"""Scene data model and the on-disk bundle format.

A scene pairs a trajectory tensor ``Y [T, N, 2]`` (native units) with a
per-timestep possessor index ``E [T]`` where index 0 is the ball itself
(no possessor). Agent 0 is always the ball; players are 1..N-1, home
before away when teams exist.

Bundle directory layout (the interchange format for every pipeline stage):

    meta.json      UTF-8 JSON: version=1, T, N, fps, units, field_extent,
                   dataset_tag
    traj.f32le     little-endian float32, row-major [t][n][xy], T*N*2 values
    events.u16le   little-endian uint16, T values
    caption.txt    optional UTF-8 text
    wpg.json       optional JSON integer list
    textemb.f32le  optional: 8-byte header (u32 L, u32 d, little-endian)
                   followed by L*d float32 values
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BUNDLE_VERSION = 1


class BundleError(ValueError):
    """Base class for bundle read failures."""


class BundleHeaderError(BundleError):
    """Missing or malformed header / metadata."""


class BundleVersionError(BundleError):
    """Unsupported bundle version."""


class BundleShapeError(BundleError):
    """Payload byte count disagrees with the declared shape."""


@dataclass(frozen=True)
class SceneMeta:
    T: int
    N: int
    fps: float
    units: str
    field_extent: tuple[float, float]
    dataset_tag: str = ""


@dataclass(frozen=True)
class Scene:
    """Immutable trajectory + possessor-event pair."""

    Y: np.ndarray  # [T, N, 2] float, native units
    E: np.ndarray  # [T] int, values in [0, N-1]
    meta: SceneMeta

    def __post_init__(self):
        T, N = self.meta.T, self.meta.N
        if N < 2:
            raise ValueError(f"scene needs the ball plus at least one player, got N={N}")
        if self.Y.shape != (T, N, 2):
            raise ValueError(f"Y shape {self.Y.shape} != ({T}, {N}, 2)")
        if self.E.shape != (T,):
            raise ValueError(f"E shape {self.E.shape} != ({T},)")
        if not np.all(np.isfinite(self.Y)):
            raise ValueError("trajectories contain non-finite values")
        if self.E.min(initial=0) < 0 or self.E.max(initial=0) >= N:
            raise ValueError(f"event indices outside [0, {N - 1}]")
        self.Y.setflags(write=False)
        self.E.setflags(write=False)


@dataclass(frozen=True)
class Mask:
    """Binary observation mask, 1 = observed, 0 = to generate."""

    M: np.ndarray  # [T, N] of {0, 1}

    def __post_init__(self):
        if not np.isin(self.M, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        self.M.setflags(write=False)


def make_task_mask(task: str, T: int, N: int, T_obs: int) -> Mask:
    """Observation mask for a completion task.

    ``future``: the first T_obs frames are observed. ``imputation``:
    additionally the final frame is observed.
    """
    if not 0 < T_obs < T:
        raise ValueError(f"need 0 < T_obs < T, got T_obs={T_obs}, T={T}")
    M = np.zeros((T, N), dtype=np.float64)
    M[:T_obs] = 1.0
    if task == "imputation":
        M[T - 1] = 1.0
    elif task != "future":
        raise ValueError(f"unknown task {task!r}")
    return Mask(M=M)


def event_indicator(E: np.ndarray, N: int) -> np.ndarray:
    """One-hot rows [T, N]: row t is hot at E[t]."""
    E = np.asarray(E)
    if E.size and (E.min() < 0 or E.max() >= N):
        raise ValueError(f"event index outside [0, {N - 1}]")
    out = np.zeros((E.shape[0], N), dtype=np.float64)
    out[np.arange(E.shape[0]), E] = 1.0
    return out


def observed_state(Y_norm: np.ndarray, E: np.ndarray, M: np.ndarray) -> np.ndarray:
    """[T, N, 3] observed coordinates + event indicator, zeroed where M=0."""
    T, N = M.shape
    X = np.concatenate([Y_norm, event_indicator(E, N)[..., None]], axis=-1)
    return X * M[..., None]


def normalize(Y: np.ndarray, field_extent) -> np.ndarray:
    """Affine map of native coordinates [0, extent] -> [-1, 1] per axis."""
    ext = np.asarray(field_extent, dtype=np.float64)
    if np.any(ext <= 0):
        raise ValueError(f"field extent must be positive, got {field_extent}")
    return 2.0 * Y / ext - 1.0


def denormalize(Y_norm: np.ndarray, field_extent) -> np.ndarray:
    ext = np.asarray(field_extent, dtype=np.float64)
    if np.any(ext <= 0):
        raise ValueError(f"field extent must be positive, got {field_extent}")
    return (Y_norm + 1.0) * ext / 2.0


# ---------------------------------------------------------------------------
# bundle I/O
# ---------------------------------------------------------------------------

def save_bundle(scene: Scene, out_dir, caption: str | None = None,
                wpg: list[int] | None = None,
                text_embedding: np.ndarray | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": BUNDLE_VERSION,
        "T": scene.meta.T,
        "N": scene.meta.N,
        "fps": scene.meta.fps,
        "units": scene.meta.units,
        "field_extent": list(scene.meta.field_extent),
        "dataset_tag": scene.meta.dataset_tag,
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
    (out / "traj.f32le").write_bytes(
        scene.Y.astype("<f4").tobytes(order="C"))
    (out / "events.u16le").write_bytes(scene.E.astype("<u2").tobytes())
    if caption is not None:
        (out / "caption.txt").write_text(caption, encoding="utf-8")
    if wpg is not None:
        (out / "wpg.json").write_text(json.dumps([int(v) for v in wpg]), encoding="utf-8")
    if text_embedding is not None:
        write_embedding_file(out / "textemb.f32le", text_embedding)
    return out


def load_bundle(bundle_dir) -> Scene:
    path = Path(bundle_dir)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise BundleHeaderError(f"{meta_path}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleHeaderError(f"{meta_path}: invalid JSON ({exc})") from exc
    required = {"version", "T", "N", "fps", "units", "field_extent", "dataset_tag"}
    missing = required - meta.keys()
    if missing:
        raise BundleHeaderError(f"{meta_path}: missing keys {sorted(missing)}")
    if meta["version"] != BUNDLE_VERSION:
        raise BundleVersionError(
            f"{meta_path}: unsupported version {meta['version']}")
    T, N = int(meta["T"]), int(meta["N"])

    raw = (path / "traj.f32le").read_bytes()
    if len(raw) != T * N * 2 * 4:
        raise BundleShapeError(
            f"{path / 'traj.f32le'}: {len(raw)} bytes, expected {T * N * 2 * 4}")
    Y = np.frombuffer(raw, dtype="<f4").reshape(T, N, 2).astype(np.float64)

    raw = (path / "events.u16le").read_bytes()
    if len(raw) != T * 2:
        raise BundleShapeError(
            f"{path / 'events.u16le'}: {len(raw)} bytes, expected {T * 2}")
    E = np.frombuffer(raw, dtype="<u2").astype(np.int64)

    return Scene(
        Y=Y, E=E,
        meta=SceneMeta(
            T=T, N=N, fps=float(meta["fps"]), units=str(meta["units"]),
            field_extent=tuple(float(v) for v in meta["field_extent"]),
            dataset_tag=str(meta["dataset_tag"]),
        ),
    )


def load_caption(bundle_dir) -> str | None:
    p = Path(bundle_dir) / "caption.txt"
    return p.read_text(encoding="utf-8") if p.exists() else None


def load_wpg(bundle_dir) -> list[int] | None:
    p = Path(bundle_dir) / "wpg.json"
    if not p.exists():
        return None
    try:
        seq = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleHeaderError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(seq, list) or not all(isinstance(v, int) for v in seq):
        raise BundleHeaderError(f"{p}: expected a JSON integer list")
    return seq


def write_embedding_file(path, mat: np.ndarray):
    """L x d float32 matrix with an 8-byte (u32 L, u32 d) header."""
    mat = np.asarray(mat)
    if mat.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-d, got shape {mat.shape}")
    L, d = mat.shape
    Path(path).write_bytes(struct.pack("<II", L, d) + mat.astype("<f4").tobytes(order="C"))


def read_embedding_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise BundleHeaderError(f"{path}: truncated header ({len(raw)} bytes)")
    L, d = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + L * d * 4:
        raise BundleShapeError(
            f"{path}: {len(raw) - 8} payload bytes, expected {L * d * 4} for {L}x{d}")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(L, d).astype(np.float64)


def load_text_embedding(bundle_dir) -> np.ndarray | None:
    p = Path(bundle_dir) / "textemb.f32le"
    return read_embedding_file(p) if p.exists() else None


# ---------------------------------------------------------------------------
# guidance signals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WpgGuidance:
    """One-hot possessor sequence [L, N]; hot indices are players (>= 1)."""

    onehot: np.ndarray

    def __post_init__(self):
        G = self.onehot
        if G.ndim != 2:
            raise ValueError(f"WPG matrix must be 2-d, got shape {G.shape}")
        if G.size:
            if not np.isin(G, (0, 1)).all() or not np.all(G.sum(axis=1) == 1):
                raise ValueError("WPG rows must be one-hot")
            if np.any(G[:, 0] == 1):
                raise ValueError("WPG entries must name players (index >= 1)")
        G.setflags(write=False)

    @property
    def indices(self) -> np.ndarray:
        return self.onehot.argmax(axis=1)


@dataclass(frozen=True)
class TextGuidance:
    """Embedding matrix [L, d_text]."""

    embedding: np.ndarray

    def __post_init__(self):
        if self.embedding.ndim != 2:
            raise ValueError(
                f"text embedding must be 2-d, got shape {self.embedding.shape}")
        if not np.all(np.isfinite(self.embedding)):
            raise ValueError("text embedding contains non-finite values")
        self.embedding.setflags(write=False)


Guidance = WpgGuidance | TextGuidance | None
