"""Two-headed denoising network.

Input projection with learnable agent embeddings, a step embedding, two
residual denoising blocks (recurrent temporal mixer -> layer norm ->
optional guidance cross-attention -> two social encoder layers), an output
projection, and regression (noise) / classification (clean-event) heads.

Guidance is injected by CrossGuid, which has two variants: possessor-
sequence guidance attends the ball's representation over the embedded
possessor list and offsets the player channels by their agent embeddings;
text guidance lets every agent attend over projected text tokens. With no
guidance the module is bypassed entirely, so an unconditional pass never
touches its weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import Tensor
from .layers import (Linear, LayerNorm, MultiHeadAttention, RecurrentMixer,
                     SocialEncoderLayer, positional_encoding, sinusoid_features)
from .scene import Guidance, TextGuidance, WpgGuidance

GUIDANCE_MODES = ("none", "wpg", "text")


@dataclass(frozen=True)
class DenoiserConfig:
    N: int
    T: int
    hidden: int = 256
    heads: int = 8
    ff_dim: int = 1024
    n_rdb: int = 2
    social_layers_per_stb: int = 2
    step_emb_dim: int = 128
    d_text: int = 768
    guidance_mode: str = "none"
    max_step: int = 50

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.guidance_mode not in GUIDANCE_MODES:
            raise ValueError(f"guidance_mode must be one of {GUIDANCE_MODES}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(**d)


class CrossGuidWpg:
    """Cross-attention from the ball onto an embedded possessor sequence.

    Keys/values are agent-embedding lookups of the guidance indices; the
    query is the ball channel. Only the ball receives the attention update;
    every player channel is offset by its own embedding.
    """

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator, name: str):
        self.n_emb = E.parameter(
            rng.normal(size=(cfg.N, cfg.hidden)) / np.sqrt(cfg.hidden),
            f"{name}.n_emb")
        self.mha = MultiHeadAttention(cfg.hidden, cfg.heads, rng, f"{name}.mha")

    def __call__(self, H: Tensor, g: WpgGuidance) -> Tensor:
        """H: [T, N, C] single scene."""
        T, N, C = H.shape
        idx = g.indices
        if idx.size and idx.min() < 1:
            raise ValueError("possessor guidance may not reference the ball")
        kv = E.gather(self.n_emb, idx, axis=0)  # [L, C]
        kv = E.add(kv, E.tensor(positional_encoding(idx.size, C), dtype=H.dtype))
        ball = E.reshape(E.slice_axis(H, 1, 0, 1), (T, C))
        q = E.add(ball, E.tensor(positional_encoding(T, C), dtype=H.dtype))
        delta = self.mha(q, kv, kv)
        new_ball = E.reshape(E.add(ball, delta), (T, 1, C))
        players = E.slice_axis(H, 1, 1, N)
        offs = E.reshape(E.gather(self.n_emb, np.arange(1, N), axis=0), (1, N - 1, C))
        new_players = E.add(players, E.broadcast_to(offs, (T, N - 1, C)))
        return E.concat([new_ball, new_players], axis=1)

    def named_params(self):
        return [(self.n_emb.name, self.n_emb)] + self.mha.named_params()


class CrossGuidText:
    """Per-agent cross-attention onto projected text tokens.

    Queries are the agent channels plus their agent embeddings; all agents
    share the projected token keys/values and all receive the update.
    """

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator, name: str):
        self.n_emb = E.parameter(
            rng.normal(size=(cfg.N, cfg.hidden)) / np.sqrt(cfg.hidden),
            f"{name}.n_emb")
        self.proj = Linear(cfg.d_text, cfg.hidden, rng, f"{name}.proj")
        self.mha = MultiHeadAttention(cfg.hidden, cfg.heads, rng, f"{name}.mha")

    def __call__(self, H: Tensor, g: TextGuidance) -> Tensor:
        T, N, C = H.shape
        L = g.embedding.shape[0]
        kv = self.proj(E.tensor(g.embedding, dtype=H.dtype))  # [L, C]
        kv = E.add(kv, E.tensor(positional_encoding(L, C), dtype=H.dtype))
        emb = E.reshape(self.n_emb, (1, N, C))
        q = E.add(H, E.broadcast_to(emb, (T, N, C)))
        pe_t = E.reshape(E.tensor(positional_encoding(T, C), dtype=H.dtype), (T, 1, C))
        q = E.add(q, E.broadcast_to(pe_t, (T, N, C)))
        q = E.transpose(q, (1, 0, 2))  # [N, T, C]
        kv_b = E.broadcast_to(E.reshape(kv, (1, L, C)), (N, L, C))
        delta = E.transpose(self.mha(q, kv_b, kv_b), (1, 0, 2))
        return E.add(H, delta)

    def named_params(self):
        return [(self.n_emb.name, self.n_emb)] + self.proj.named_params() \
            + self.mha.named_params()


class SocialTemporalBlock:
    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator, name: str):
        self.mixer = RecurrentMixer(cfg.hidden, rng, f"{name}.tm")
        self.ln = LayerNorm(cfg.hidden, f"{name}.ln")
        if cfg.guidance_mode == "wpg":
            self.guide = CrossGuidWpg(cfg, rng, f"{name}.guide")
        elif cfg.guidance_mode == "text":
            self.guide = CrossGuidText(cfg, rng, f"{name}.guide")
        else:
            self.guide = None
        self.social = [
            SocialEncoderLayer(cfg.hidden, cfg.heads, cfg.ff_dim, rng,
                               f"{name}.st{i}")
            for i in range(cfg.social_layers_per_stb)
        ]

    def __call__(self, J: Tensor, guidance: list[Guidance],
                 sink: list | None = None) -> Tensor:
        B, T, N, C = J.shape
        H = self.ln(self.mixer(J))
        if self.guide is not None and any(g is not None for g in guidance):
            rows = []
            for b, g in enumerate(guidance):
                Hb = E.reshape(E.slice_axis(H, 0, b, b + 1), (T, N, C))
                if g is not None:
                    Hb = self.guide(Hb, g)
                rows.append(E.reshape(Hb, (1, T, N, C)))
            H = E.concat(rows, axis=0)
        for layer in self.social:
            H = layer(H, sink)
        return H

    def named_params(self):
        out = self.mixer.named_params() + self.ln.named_params()
        if self.guide is not None:
            out += self.guide.named_params()
        for layer in self.social:
            out += layer.named_params()
        return out


class ResidualDenoisingBlock:
    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator, name: str):
        self.step_lin = Linear(cfg.step_emb_dim, cfg.hidden, rng, f"{name}.step")
        self.stb = SocialTemporalBlock(cfg, rng, f"{name}.stb")

    def __call__(self, J: Tensor, s_emb: Tensor, guidance: list[Guidance],
                 sink: list | None = None) -> Tensor:
        B, T, N, C = J.shape
        inj = E.reshape(self.step_lin(s_emb), (B, 1, 1, C))
        inner = E.add(J, E.broadcast_to(inj, (B, T, N, C)))
        return E.add(J, self.stb(inner, guidance, sink))

    def named_params(self):
        return self.step_lin.named_params() + self.stb.named_params()


class Denoiser:
    """Full network; parameters are float64 leaves created at init."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.cfg = cfg
        C = cfg.hidden
        self.in_lin = Linear(7, C, rng, "proj_in.lin")
        self.agent_emb = E.parameter(
            rng.normal(size=(cfg.N, C)) / np.sqrt(C), "proj_in.agent_emb")
        self.fuse = Linear(2 * C, C, rng, "proj_in.fuse")
        self.step_lin = Linear(cfg.step_emb_dim, cfg.step_emb_dim, rng, "proj_s.lin")
        self.rdbs = [ResidualDenoisingBlock(cfg, rng, f"rdb{i}")
                     for i in range(cfg.n_rdb)]
        self.out_lin = Linear(C, C, rng, "proj_out.lin")
        self.head_reg = Linear(C, 2, rng, "head.reg")
        self.head_cls = Linear(C, 1, rng, "head.cls")

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = self.in_lin.named_params()
        out.append((self.agent_emb.name, self.agent_emb))
        out += self.fuse.named_params() + self.step_lin.named_params()
        for rdb in self.rdbs:
            out += rdb.named_params()
        out += self.out_lin.named_params() + self.head_reg.named_params() \
            + self.head_cls.named_params()
        return out

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def astype(self, dtype) -> "Denoiser":
        for _, p in self.named_params():
            p.v = p.v.astype(dtype)
        return self

    def forward(self, X_s, X_co, M, s, guidance=None, sink: list | None = None):
        """Run the network.

        X_s, X_co: [T, N, 3] or [B, T, N, 3]; M: matching [.., T, N];
        s: int or int array [B]; guidance: one signal or a per-sample list.
        Returns (eps_hat [.., T, N, 2], event_probs [.., T, N]); event rows
        sum to 1 over the agent axis.
        """
        X_s = np.asarray(X_s)
        single = X_s.ndim == 3
        if single:
            X_s = X_s[None]
            X_co = np.asarray(X_co)[None]
            M = np.asarray(M)[None]
        B, T, N, _ = X_s.shape
        cfg = self.cfg
        if (T, N) != (cfg.T, cfg.N) or X_s.shape[-1] != 3 or X_co.shape != X_s.shape \
                or M.shape != (B, T, N):
            raise E.ShapeError(
                f"forward: X_s {X_s.shape}, X_co {np.asarray(X_co).shape}, "
                f"M {np.asarray(M).shape} inconsistent with config (T={cfg.T}, N={cfg.N})")
        s_vec = np.atleast_1d(np.asarray(s, dtype=np.int64))
        if s_vec.size == 1 and B > 1:
            s_vec = np.full(B, s_vec[0])
        if s_vec.min() < 1 or s_vec.max() > cfg.max_step:
            raise ValueError(f"step(s) {s_vec} outside [1, {cfg.max_step}]")
        if guidance is None or isinstance(guidance, (WpgGuidance, TextGuidance)):
            guidance = [guidance] * B
        if len(guidance) != B:
            raise ValueError(f"need {B} guidance entries, got {len(guidance)}")

        dtype = self.agent_emb.dtype
        x7 = np.concatenate([X_s, np.asarray(X_co),
                             np.asarray(M)[..., None]], axis=-1).astype(dtype)
        j = self.in_lin(E.tensor(x7, dtype=dtype))
        emb = E.reshape(self.agent_emb, (1, 1, N, cfg.hidden))
        j = E.concat([j, E.broadcast_to(emb, (B, T, N, cfg.hidden))], axis=-1)
        j = E.relu(self.fuse(j))

        s_feat = sinusoid_features(s_vec, cfg.step_emb_dim).astype(dtype)
        s_emb = E.silu(self.step_lin(E.tensor(s_feat, dtype=dtype)))

        for rdb in self.rdbs:
            j = rdb(j, s_emb, guidance, sink)

        h = E.relu(self.out_lin(j))
        eps_hat = self.head_reg(h)
        logits = E.reshape(self.head_cls(h), (B, T, N))
        probs = E.softmax(logits, axis=-1)
        if single:
            eps_hat = E.reshape(eps_hat, (T, N, 2))
            probs = E.reshape(probs, (T, N))
        return eps_hat, probs
