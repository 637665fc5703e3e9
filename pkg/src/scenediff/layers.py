"""Building blocks for the denoiser: linear/layer-norm wrappers, sinusoidal
features, multi-head attention and the bidirectional recurrent mixer."""

from __future__ import annotations

import math

import numpy as np

from . import engine as E
from .engine import Tensor


def sinusoid_features(positions, dim: int) -> np.ndarray:
    """Standard sin/cos features (base 10000) for integer positions."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = positions[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        out = np.concatenate([out, np.zeros((out.shape[0], 1))], axis=1)
    return out


_pe_cache: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(length: int, dim: int) -> np.ndarray:
    key = (length, dim)
    if key not in _pe_cache:
        _pe_cache[key] = sinusoid_features(np.arange(length), dim)
    return _pe_cache[key]


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 name: str, zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(size=(d_in, d_out)) / math.sqrt(d_in)
        self.w = E.parameter(w, f"{name}.w")
        self.b = E.parameter(np.zeros(d_out), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        y = E.matmul(x, self.w)
        bias = E.reshape(self.b, (1,) * (y.ndim - 1) + (self.b.shape[0],))
        return E.add(y, E.broadcast_to(bias, y.shape))

    def named_params(self):
        return [(self.w.name, self.w), (self.b.name, self.b)]


class LayerNorm:
    def __init__(self, dim: int, name: str):
        self.gain = E.parameter(np.ones(dim), f"{name}.gain")
        self.bias = E.parameter(np.zeros(dim), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return E.layer_norm(x, self.gain, self.bias)

    def named_params(self):
        return [(self.gain.name, self.gain), (self.bias.name, self.bias)]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., L, C] -> [..., heads, L, C/heads]"""
    *lead, L, C = x.shape
    x = E.reshape(x, (*lead, L, heads, C // heads))
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return E.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    """[..., heads, L, dh] -> [..., L, heads*dh]"""
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    x = E.transpose(x, axes)
    *lead, L, h, dh = x.shape
    return E.reshape(x, (*lead, L, h * dh))


class MultiHeadAttention:
    """Projection + scaled dot-product attention over the last two axes.

    Query and key/value inputs may carry arbitrary identical leading dims.
    When ``sink`` is given, each call appends the attention probabilities
    (numpy, shape [..., heads, Lq, Lk]) for diagnostics.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 name: str, zero_out: bool = True):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = 1.0 / math.sqrt(dim // heads)
        self.wq = Linear(dim, dim, rng, f"{name}.q")
        self.wk = Linear(dim, dim, rng, f"{name}.k")
        self.wv = Linear(dim, dim, rng, f"{name}.v")
        self.wo = Linear(dim, dim, rng, f"{name}.out", zero_init=zero_out)

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor,
                 sink: list | None = None) -> Tensor:
        q = _split_heads(self.wq(q_in), self.heads)
        k = _split_heads(self.wk(k_in), self.heads)
        v = _split_heads(self.wv(v_in), self.heads)
        kt = E.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
        scores = E.mul(E.matmul(q, kt), self.scale)
        probs = E.softmax(scores, axis=-1)
        if sink is not None:
            sink.append(probs.v.copy())
        out = _merge_heads(E.matmul(probs, v))
        return self.wo(out)

    def named_params(self):
        out = []
        for lin in (self.wq, self.wk, self.wv, self.wo):
            out.extend(lin.named_params())
        return out


class RecurrentMixer:
    """Bidirectional gated recurrent pass over time, shared across agents.

    Causal and anticausal scans (separate weights) are summed and passed
    through an output projection that starts at zero, so the mixer
    contributes nothing at initialization.
    """

    def __init__(self, dim: int, rng: np.random.Generator, name: str):
        self.dim = dim
        self.fwd_in = Linear(dim, 3 * dim, rng, f"{name}.fwd_in")
        self.bwd_in = Linear(dim, 3 * dim, rng, f"{name}.bwd_in")
        self.fwd_u = E.parameter(rng.normal(size=(dim, 3 * dim)) / math.sqrt(dim),
                                 f"{name}.fwd_u")
        self.bwd_u = E.parameter(rng.normal(size=(dim, 3 * dim)) / math.sqrt(dim),
                                 f"{name}.bwd_u")
        self.out = Linear(dim, dim, rng, f"{name}.out", zero_init=True)

    def _scan(self, seq: Tensor, w_in: Linear, u: Tensor, h0) -> Tensor:
        return E.gru_scan(w_in(seq), h0, u)

    def __call__(self, x: Tensor) -> Tensor:
        """x: [B, T, N, C] -> [B, T, N, C]; each agent mixed independently."""
        B, T, N, C = x.shape
        seq = E.reshape(E.transpose(x, (1, 0, 2, 3)), (T, B * N, C))
        h0 = E.tensor(np.zeros((B * N, C), dtype=x.dtype))
        fwd = self._scan(seq, self.fwd_in, self.fwd_u, h0)
        rev = E.flip(seq, 0)
        bwd = E.flip(self._scan(rev, self.bwd_in, self.bwd_u, h0), 0)
        merged = self.out(E.add(fwd, bwd))
        return E.transpose(E.reshape(merged, (T, B, N, C)), (1, 0, 2, 3))

    def named_params(self):
        out = self.fwd_in.named_params() + self.bwd_in.named_params()
        out += [(self.fwd_u.name, self.fwd_u), (self.bwd_u.name, self.bwd_u)]
        out += self.out.named_params()
        return out


class SocialEncoderLayer:
    """Post-norm transformer encoder layer over the agent axis."""

    def __init__(self, dim: int, heads: int, ff_dim: int,
                 rng: np.random.Generator, name: str):
        self.attn = MultiHeadAttention(dim, heads, rng, f"{name}.attn")
        self.ff1 = Linear(dim, ff_dim, rng, f"{name}.ff1")
        self.ff2 = Linear(ff_dim, dim, rng, f"{name}.ff2", zero_init=True)
        self.ln1 = LayerNorm(dim, f"{name}.ln1")
        self.ln2 = LayerNorm(dim, f"{name}.ln2")

    def __call__(self, x: Tensor, sink: list | None = None) -> Tensor:
        """x: [..., N, C] with attention across the N axis."""
        x = self.ln1(E.add(x, self.attn(x, x, x, sink)))
        return self.ln2(E.add(x, self.ff2(E.relu(self.ff1(x)))))

    def named_params(self):
        out = self.attn.named_params()
        for piece in (self.ff1, self.ff2, self.ln1, self.ln2):
            out.extend(piece.named_params())
        return out
