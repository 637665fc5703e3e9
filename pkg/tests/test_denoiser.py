"""Denoiser structure: heads, residual blocks, the temporal mixer, both
guidance variants, bypass correctness, gradient integrity, checkpoints."""

import numpy as np
import pytest

import scenediff.denoiser as dn
from scenediff import engine as E
from scenediff import gaussian, multinomial
from scenediff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from scenediff.denoiser import (CrossGuidText, CrossGuidWpg, Denoiser,
                                DenoiserConfig)
from scenediff.layers import sinusoid_features
from scenediff.scene import (TextGuidance, WpgGuidance, event_indicator,
                             observed_state)
from scenediff.schedule import build_joint

SMALL = dict(hidden=32, heads=4, ff_dim=64, d_text=16)


def small_config(**kw) -> DenoiserConfig:
    args = dict(N=3, T=4, **SMALL)
    args.update(kw)
    return DenoiserConfig(**args)


def jitter(model: Denoiser, seed=99, scale=0.05):
    """Move parameters off the zero-init point (generic position)."""
    rng = np.random.default_rng(seed)
    for _, p in model.named_params():
        p.v = p.v + scale * rng.normal(size=p.shape)
    return model


def toy_inputs(cfg: DenoiserConfig, seed=0):
    rng = np.random.default_rng(seed)
    T, N = cfg.T, cfg.N
    Y0 = rng.uniform(-1, 1, size=(T, N, 2))
    E0 = rng.integers(0, N, size=T)
    M = np.zeros((T, N))
    M[: T // 2] = 1
    eps = rng.standard_normal((T, N, 2))
    sched = build_joint()
    s = 17
    Ys = gaussian.q_sample_continuous(Y0, s, eps, sched.cont)
    Es = multinomial.q_sample_categorical(event_indicator(E0, N),
                                          sched.align(s), rng, sched.disc)
    Xs = np.concatenate([Ys, Es[..., None]], axis=-1)
    Xco = observed_state(Y0, E0, M)
    return dict(Xs=Xs, Xco=Xco, M=M, s=s, eps=eps, E0=E0, Es=Es, sched=sched)


class TestForwardContract:
    def test_output_shapes_and_probs(self):
        cfg = small_config()
        model = Denoiser(cfg, np.random.default_rng(0))
        t = toy_inputs(cfg)
        with E.no_grad():
            eps_hat, probs = model.forward(t["Xs"], t["Xco"], t["M"], t["s"])
        assert eps_hat.shape == (4, 3, 2)
        assert probs.shape == (4, 3)
        np.testing.assert_allclose(probs.v.sum(axis=-1), 1.0, atol=1e-6)

    def test_prob_rows_normalize_for_any_params(self):
        cfg = small_config()
        model = jitter(Denoiser(cfg, np.random.default_rng(1)), scale=0.8)
        t = toy_inputs(cfg, seed=3)
        with E.no_grad():
            _, probs = model.forward(t["Xs"], t["Xco"], t["M"], t["s"])
        np.testing.assert_allclose(probs.v.sum(axis=-1), 1.0, atol=1e-6)

    def test_step_out_of_range(self):
        cfg = small_config()
        model = Denoiser(cfg, np.random.default_rng(0))
        t = toy_inputs(cfg)
        with pytest.raises(ValueError):
            model.forward(t["Xs"], t["Xco"], t["M"], 0)
        with pytest.raises(ValueError):
            model.forward(t["Xs"], t["Xco"], t["M"], 51)

    def test_shape_mismatch(self):
        cfg = small_config()
        model = Denoiser(cfg, np.random.default_rng(0))
        t = toy_inputs(cfg)
        with pytest.raises(E.ShapeError):
            model.forward(t["Xs"][:, :2], t["Xco"][:, :2], t["M"][:, :2], 5)

    def test_step_sensitivity(self):
        cfg = small_config()
        model = jitter(Denoiser(cfg, np.random.default_rng(0)))
        t = toy_inputs(cfg)
        with E.no_grad():
            a, _ = model.forward(t["Xs"], t["Xco"], t["M"], 5)
            b, _ = model.forward(t["Xs"], t["Xco"], t["M"], 45)
        assert np.abs(a.v - b.v).max() > 1e-8


class TestInitializationStructure:
    def test_identity_plus_heads_at_init(self):
        """Zero-initialized residual branches leave the trunk untouched."""
        cfg = small_config()
        model = Denoiser(cfg, np.random.default_rng(2))
        rng = np.random.default_rng(3)
        j = E.tensor(rng.normal(size=(2, cfg.T, cfg.N, cfg.hidden)))
        s_feat = sinusoid_features(np.array([3, 9]), cfg.step_emb_dim)
        s_emb = E.silu(model.step_lin(E.tensor(s_feat)))
        out = j
        for rdb in model.rdbs:
            out = rdb(out, s_emb, [None, None])
        np.testing.assert_array_equal(out.v, j.v)

    def test_heads_finite_at_init(self):
        cfg = small_config()
        model = Denoiser(cfg, np.random.default_rng(2))
        t = toy_inputs(cfg)
        with E.no_grad():
            eps_hat, probs = model.forward(t["Xs"], t["Xco"], t["M"], t["s"])
        assert np.all(np.isfinite(eps_hat.v))
        assert np.all(np.isfinite(probs.v))

    def test_rdbs_do_not_share_weights(self):
        cfg = small_config()
        model = Denoiser(cfg, np.random.default_rng(2))
        names = [n for n, _ in model.named_params()]
        assert len(names) == len(set(names))
        rdb0 = {n for n in names if n.startswith("rdb0.")}
        rdb1 = {n for n in names if n.startswith("rdb1.")}
        assert rdb0 and rdb1
        assert {n.removeprefix("rdb0.") for n in rdb0} == \
               {n.removeprefix("rdb1.") for n in rdb1}


class TestBypass:
    def _paired_models(self, guidance_mode):
        cfg_g = small_config(guidance_mode=guidance_mode)
        cfg_p = small_config(guidance_mode="none")
        guided = jitter(Denoiser(cfg_g, np.random.default_rng(4)), seed=11)
        plain = Denoiser(cfg_p, np.random.default_rng(4))
        guided_params = dict(guided.named_params())
        for name, p in plain.named_params():
            p.v = guided_params[name].v.copy()
        return guided, plain

    @pytest.mark.parametrize("mode", ["wpg", "text"])
    def test_no_guidance_bit_identical_to_plain_model(self, mode):
        guided, plain = self._paired_models(mode)
        cfg = small_config()
        t = toy_inputs(cfg, seed=5)
        with E.no_grad():
            a, pa = guided.forward(t["Xs"], t["Xco"], t["M"], t["s"], None)
            b, pb = plain.forward(t["Xs"], t["Xco"], t["M"], t["s"], None)
        np.testing.assert_array_equal(a.v, b.v)
        np.testing.assert_array_equal(pa.v, pb.v)

    def test_guidance_changes_output(self):
        cfg = small_config(guidance_mode="wpg")
        model = jitter(Denoiser(cfg, np.random.default_rng(4)), seed=12)
        t = toy_inputs(cfg, seed=5)
        g = WpgGuidance(onehot=np.array([[0, 1, 0], [0, 0, 1]], dtype=float))
        with E.no_grad():
            a, _ = model.forward(t["Xs"], t["Xco"], t["M"], t["s"], None)
            b, _ = model.forward(t["Xs"], t["Xco"], t["M"], t["s"], g)
        assert np.abs(a.v - b.v).max() > 1e-9


class TestPermutationEquivariance:
    def test_ball_invariant_under_player_permutation_with_tied_embeddings(self):
        cfg = DenoiserConfig(N=4, T=3, **SMALL)
        model = jitter(Denoiser(cfg, np.random.default_rng(6)), seed=13)
        # tie every agent embedding so identity is the only asymmetry left
        model.agent_emb.v = np.tile(model.agent_emb.v[:1], (4, 1))
        t = toy_inputs(cfg, seed=7)
        perm = np.array([0, 3, 1, 2])
        with E.no_grad():
            a, pa = model.forward(t["Xs"], t["Xco"], t["M"], t["s"])
            b, pb = model.forward(t["Xs"][:, perm], t["Xco"][:, perm],
                                  t["M"][:, perm], t["s"])
        np.testing.assert_allclose(b.v[:, 0], a.v[:, 0], atol=1e-10)
        inv = np.argsort(perm)
        np.testing.assert_allclose(b.v[:, inv], a.v, atol=1e-10)
        np.testing.assert_allclose(pb.v[:, inv], pa.v, atol=1e-10)


class TestTemporalMixer:
    def test_constant_input_fixed_point_with_zero_transition(self):
        from scenediff.kernels import scan_forward
        rng = np.random.default_rng(8)
        H = 6
        xg_row = rng.normal(size=3 * H)
        xg = np.tile(xg_row, (5, 1, 1))  # constant over time, one batch row
        u = np.zeros((H, 3 * H))
        z = 1 / (1 + np.exp(-xg_row[:H]))
        n = np.tanh(xg_row[2 * H:])
        h0 = n[None, :].copy()  # start at the fixed point
        hs, _ = scan_forward(xg, h0, u)
        np.testing.assert_allclose(hs, np.tile(n, (5, 1, 1)), atol=1e-12)

    def test_output_depends_on_future_inputs(self):
        from scenediff.layers import RecurrentMixer
        rng = np.random.default_rng(9)
        mixer = RecurrentMixer(8, rng, "tm")
        mixer.out.w.v = rng.normal(size=(8, 8)) * 0.3  # make it observable
        x = rng.normal(size=(1, 6, 1, 8))
        with E.no_grad():
            base = mixer(E.tensor(x)).v
            bumped = x.copy()
            bumped[0, 5] += 1.0  # perturb the last frame
            out = mixer(E.tensor(bumped)).v
        assert np.abs(out[0, 0] - base[0, 0]).max() > 1e-9  # t=0 sees t=5

    def test_single_timestep(self):
        from scenediff.layers import RecurrentMixer
        rng = np.random.default_rng(10)
        mixer = RecurrentMixer(8, rng, "tm")
        x = rng.normal(size=(2, 1, 3, 8))
        with E.no_grad():
            out = mixer(E.tensor(x))
        assert out.shape == (2, 1, 3, 8)


class TestCrossGuidWpg:
    def _setup(self, seed=14):
        cfg = small_config(guidance_mode="wpg")
        rng = np.random.default_rng(seed)
        block = CrossGuidWpg(cfg, rng, "cg")
        H = E.tensor(np.random.default_rng(seed + 1).normal(size=(cfg.T, cfg.N, cfg.hidden)))
        g = WpgGuidance(onehot=np.array([[0, 1, 0], [0, 0, 1]], dtype=float))
        return cfg, block, H, g

    def test_zero_init_leaves_ball_adds_player_offsets(self):
        cfg, block, H, g = self._setup()
        with E.no_grad():
            out = block(H, g).v
        np.testing.assert_array_equal(out[:, 0], H.v[:, 0])
        for n in (1, 2):
            np.testing.assert_allclose(
                out[:, n] - H.v[:, n],
                np.tile(block.n_emb.v[n], (cfg.T, 1)), atol=1e-12)

    def test_single_key_attention_ignores_query(self):
        cfg, block, H, _ = self._setup()
        rng = np.random.default_rng(15)
        block.mha.wo.w.v = rng.normal(size=block.mha.wo.w.shape) * 0.3
        g1 = WpgGuidance(onehot=np.array([[0, 1, 0]], dtype=float))
        H2 = E.tensor(np.random.default_rng(16).normal(size=H.shape))
        with E.no_grad():
            d1 = block(H, g1).v[:, 0] - H.v[:, 0]
            d2 = block(H2, g1).v[:, 0] - H2.v[:, 0]
        # one key: softmax weight is 1 regardless of the query content
        np.testing.assert_allclose(d1, d2, atol=1e-10)

    def test_ball_index_rejected(self):
        cfg, block, H, _ = self._setup()
        bad = WpgGuidance.__new__(WpgGuidance)  # bypass validation
        object.__setattr__(bad, "onehot", np.array([[1.0, 0.0, 0.0]]))
        with pytest.raises(ValueError):
            block(H, bad)

    def test_sequence_order_matters_only_through_positions(self, monkeypatch):
        cfg, block, H, _ = self._setup()
        rng = np.random.default_rng(17)
        block.mha.wo.w.v = rng.normal(size=block.mha.wo.w.shape) * 0.3
        fwd = WpgGuidance(onehot=np.array([[0, 1, 0], [0, 0, 1]], dtype=float))
        rev = WpgGuidance(onehot=np.array([[0, 0, 1], [0, 1, 0]], dtype=float))
        with E.no_grad():
            a = block(H, fwd).v
            b = block(H, rev).v
        assert np.abs(a - b).max() > 1e-9
        monkeypatch.setattr(dn, "positional_encoding",
                            lambda length, dim: np.zeros((length, dim)))
        with E.no_grad():
            a = block(H, fwd).v
            b = block(H, rev).v
        np.testing.assert_allclose(a, b, atol=1e-10)


class TestCrossGuidText:
    def _setup(self, seed=18):
        cfg = small_config(guidance_mode="text")
        rng = np.random.default_rng(seed)
        block = CrossGuidText(cfg, rng, "cg")
        H = E.tensor(np.random.default_rng(seed + 1).normal(size=(cfg.T, cfg.N, cfg.hidden)))
        g = TextGuidance(embedding=np.random.default_rng(seed + 2)
                         .normal(size=(5, cfg.d_text)))
        return cfg, block, H, g

    def test_zero_init_is_identity(self):
        cfg, block, H, g = self._setup()
        with E.no_grad():
            out = block(H, g).v
        np.testing.assert_array_equal(out, H.v)

    def test_distinct_embeddings_give_distinct_updates(self):
        cfg, block, H, g = self._setup()
        rng = np.random.default_rng(19)
        block.mha.wo.w.v = rng.normal(size=block.mha.wo.w.shape) * 0.3
        Hv = H.v.copy()
        Hv[:, 1] = Hv[:, 0]  # two agents share representations
        with E.no_grad():
            out = block(E.tensor(Hv), g).v
        assert np.abs((out[:, 0] - Hv[:, 0]) - (out[:, 1] - Hv[:, 1])).max() > 1e-9

    def test_update_applies_to_all_agents(self):
        cfg, block, H, g = self._setup()
        rng = np.random.default_rng(20)
        block.mha.wo.w.v = rng.normal(size=block.mha.wo.w.shape) * 0.3
        with E.no_grad():
            out = block(H, g).v
        for n in range(cfg.N):
            assert np.abs(out[:, n] - H.v[:, n]).max() > 1e-12


class TestGradientIntegrity:
    @pytest.mark.parametrize("mode,make_g", [
        ("wpg", lambda: WpgGuidance(onehot=np.array([[0, 1, 0], [0, 0, 1]],
                                                    dtype=float))),
        ("text", lambda: TextGuidance(
            embedding=np.random.default_rng(30).normal(size=(4, 16)))),
    ])
    def test_full_network_joint_loss(self, mode, make_g):
        cfg = small_config(guidance_mode=mode)
        model = jitter(Denoiser(cfg, np.random.default_rng(21)), seed=22)
        t = toy_inputs(cfg, seed=23)
        g = make_g()
        s_d = t["sched"].align(t["s"])
        e0h = event_indicator(t["E0"], cfg.N)

        def f():
            eps_hat, probs = model.forward(t["Xs"], t["Xco"], t["M"], t["s"], g)
            l_y = gaussian.simple_loss(t["eps"], eps_hat, 1.0 - t["M"])
            l_e = multinomial.discrete_vb_term(s_d, e0h, t["Es"], probs,
                                               t["sched"].disc)
            return E.add(l_y, E.mul(l_e, 0.1))

        report = E.grad_check(f, model.params(), max_coords=2,
                              rng=np.random.default_rng(0))
        worst = max(report.values())
        assert worst < 1e-4, max(report.items(), key=lambda kv: kv[1])


class TestCheckpoint:
    def test_roundtrip_byte_exact(self, tmp_path):
        cfg = small_config(guidance_mode="wpg")
        model = jitter(Denoiser(cfg, np.random.default_rng(24)), seed=25)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(p1, model, {"S": 50, "S_d": 10})
        loaded, header = load_checkpoint(p1)
        assert header["schedule"] == {"S": 50, "S_d": 10}
        assert loaded.cfg == model.cfg
        save_checkpoint(p2, loaded, {"S": 50, "S_d": 10})
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_model_same_forward(self, tmp_path):
        cfg = small_config()
        model = jitter(Denoiser(cfg, np.random.default_rng(26)), seed=27)
        save_checkpoint(tmp_path / "m.ckpt", model, {})
        loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
        t = toy_inputs(cfg, seed=28)
        model.astype(np.float32).astype(np.float64)  # parity: f32 quantized
        with E.no_grad():
            a, _ = model.forward(t["Xs"], t["Xco"], t["M"], t["s"])
            b, _ = loaded.forward(t["Xs"], t["Xco"], t["M"], t["s"])
        np.testing.assert_allclose(a.v, b.v, atol=1e-6)

    def test_corrupt_file_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_truncated_payload_rejected(self, tmp_path):
        cfg = small_config()
        model = Denoiser(cfg, np.random.default_rng(29))
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, model, {})
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
