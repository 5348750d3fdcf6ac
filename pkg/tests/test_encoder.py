import dataclasses

import numpy as np
import pytest

from conftest import randomize_new
from dualmode.encoder import (
    EncoderConfig,
    FrameState,
    StreamingEncoder,
    attention_block,
    base_encode,
    embed_frames,
    encode,
    encode_layer,
    init_base_encoder,
    init_dual_path,
    mlp_path,
    pixel_shuffle,
    project,
    shuffle_groups,
    temporal_attend,
)
from dualmode.errors import ConfigError, ShapeError
from dualmode.numerics import Tensor, finite_diff_check


def video(cfg, frames, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((cfg.o, cfg.pixel_dim)) for _ in range(frames)]


@pytest.fixture
def trained(tiny_enc):
    base = init_base_encoder(tiny_enc, 1)
    ps = init_dual_path(base, tiny_enc, 2)
    randomize_new(ps, 3)
    return base, ps


class TestConfig:
    def test_counts(self, tiny_enc):
        assert (tiny_enc.o, tiny_enc.n_llm, tiny_enc.o_s) == (16, 2, 4)

    @pytest.mark.parametrize("change", [
        {"n_vit": 6}, {"grid_h": 3}, {"temporal_depth": 4}, {"temporal_window": 0},
        {"shuffle_factor": 2}, {"heads": 3}, {"n_vit": 20}, {"hidden_dim": 12, "heads": 2},
    ])
    def test_invalid(self, tiny_enc, change):
        with pytest.raises(ConfigError):
            dataclasses.replace(tiny_enc, **change)

    def test_default_n32_gives_8(self):
        assert EncoderConfig(n_vit=32).n_llm == 8


class TestInit:
    def test_duplicates_bit_equal(self, tiny_enc):
        ps = init_dual_path(init_base_encoder(tiny_enc, 0), tiny_enc, 0)
        for i in range(tiny_enc.depth):
            for key in ("ln.g", "ln.b", "w1", "b1", "w2", "b2"):
                a, b = ps[f"vit.block{i}.mlp_L.{key}"].value, ps[f"vit.block{i}.mlp_Z.{key}"].value
                assert a.tobytes() == b.tobytes() and a is not b
        assert ps["vit.projector_L.w"].value.tobytes() == ps["vit.projector_Z.w"].value.tobytes()

    def test_groups_partition(self, tiny_enc):
        base = init_base_encoder(tiny_enc, 0)
        ps = init_dual_path(base, tiny_enc, 0)
        original = {p.id for p in ps if p.group == "original"}
        new = {p.id for p in ps if p.group == "new"}
        assert original == set(base.ids()) and not original & new
        assert all(not ps[i].trainable for i in original) and all(ps[i].trainable for i in new)

    def test_seeded_standby(self, tiny_enc):
        base = init_base_encoder(tiny_enc, 0)
        a = init_dual_path(base, tiny_enc, 9)["vit.standby"].value
        b = init_dual_path(base, tiny_enc, 9)["vit.standby"].value
        c = init_dual_path(base, tiny_enc, 10)["vit.standby"].value
        assert np.array_equal(a, b) and not np.array_equal(a, c)
        assert 0.01 < a.std() < 0.03

    def test_temporal_only_in_last_layers(self, tiny_enc):
        ps = init_dual_path(init_base_encoder(tiny_enc, 0), tiny_enc, 0)
        have = [i for i in range(tiny_enc.depth) if f"vit.block{i}.temporal.wq" in ps]
        assert have == [1, 2]
        assert not ps["vit.block2.temporal.wo"].value.any()

    def test_shape_mismatch(self, tiny_enc):
        base = init_base_encoder(tiny_enc, 0)
        with pytest.raises(ShapeError):
            init_dual_path(base, dataclasses.replace(tiny_enc, mlp_dim=12), 0)

    def test_l_path_equals_z_path_at_init(self, tiny_enc):
        ps = init_dual_path(init_base_encoder(tiny_enc, 0), tiny_enc, 0)
        P = ps.bind()
        x = Tensor(np.random.default_rng(0).standard_normal((5, tiny_enc.hidden_dim)))
        for i in range(tiny_enc.depth):
            assert np.max(np.abs(mlp_path(P, i, x, "L").data - mlp_path(P, i, x, "Z").data)) == 0.0


class TestEncodeLayer:
    def test_single_image_skips_temporal(self, tiny_enc, trained):
        _, ps = trained
        P = ps.bind()
        (s,) = embed_frames(video(tiny_enc, 1), P, tiny_enc)
        out, _ = encode_layer(0, [s], P, tiny_enc)
        L1, Z1, _ = attention_block(P, 0, s, tiny_enc)
        assert np.array_equal(out[0].L.data, mlp_path(P, 0, L1, "L").data)

    def test_z_matches_base_every_layer(self, tiny_enc, trained):
        base, ps = trained
        px = video(tiny_enc, 4)
        P, B = ps.bind(), base.bind()
        s_dual = embed_frames(px, P, tiny_enc)
        s_base = embed_frames(px, B, tiny_enc, standby=False)
        for i in range(tiny_enc.depth):
            s_dual, _ = encode_layer(i, s_dual, P, tiny_enc)
            s_base, _ = encode_layer(i, s_base, B, tiny_enc)
            for a, b in zip(s_dual, s_base):
                assert np.max(np.abs(a.Z.data - b.Z.data)) == 0.0

    def test_future_frame_perturbation(self, tiny_enc, trained):
        _, ps = trained
        px = video(tiny_enc, 2)
        a = encode(px, ps.bind(), tiny_enc)
        px[1] = px[1] + 5.0
        b = encode(px, ps.bind(), tiny_enc)
        assert np.array_equal(a[0].l.data, b[0].l.data) and np.array_equal(a[0].z.data, b[0].z.data)
        assert not np.array_equal(a[1].l.data, b[1].l.data)

    def test_layer_range(self, tiny_enc, trained):
        _, ps = trained
        with pytest.raises(IndexError):
            encode_layer(3, [], ps.bind(), tiny_enc)


class TestTemporal:
    def test_single_frame_group(self, tiny_enc, trained):
        _, ps = trained
        P = ps.bind()
        x = Tensor(np.random.default_rng(0).standard_normal((tiny_enc.n_vit, tiny_enc.hidden_dim)))
        (out,) = temporal_attend([x], 2, P, tiny_enc)
        assert out.shape == x.shape and not np.array_equal(out.data, x.data)

    def test_causal_within_group(self, tiny_enc, trained):
        _, ps = trained
        P = ps.bind()
        rng = np.random.default_rng(1)
        g = [Tensor(rng.standard_normal((tiny_enc.n_vit, tiny_enc.hidden_dim))) for _ in range(3)]
        a = temporal_attend(g, 2, P, tiny_enc)
        g2 = g[:1] + [Tensor(rng.standard_normal(g[1].shape)) for _ in range(2)]
        b = temporal_attend(g2, 2, P, tiny_enc)
        assert np.array_equal(a[0].data, b[0].data)

    def test_identity_at_init(self, tiny_enc):
        ps = init_dual_path(init_base_encoder(tiny_enc, 0), tiny_enc, 0)
        rng = np.random.default_rng(2)
        g = [Tensor(rng.standard_normal((tiny_enc.n_vit, tiny_enc.hidden_dim))) for _ in range(3)]
        for x, y in zip(g, temporal_attend(g, 1, ps.bind(), tiny_enc)):
            assert np.array_equal(x.data, y.data)

    def test_group_too_long(self, tiny_enc, trained):
        _, ps = trained
        x = Tensor(np.ones((tiny_enc.n_vit, tiny_enc.hidden_dim)))
        with pytest.raises(ShapeError):
            temporal_attend([x] * 4, 2, ps.bind(), tiny_enc)

    def test_not_a_temporal_layer(self, tiny_enc, trained):
        _, ps = trained
        with pytest.raises(ValueError):
            temporal_attend([Tensor(np.ones((8, 16)))], 0, ps.bind(), tiny_enc)

    def test_streaming_equals_batch(self, tiny_enc, trained):
        _, ps = trained
        px = video(tiny_enc, 8, seed=4)
        batch = encode(px, ps.bind(), tiny_enc)
        se = StreamingEncoder(ps, tiny_enc)
        for f, x in zip(batch, px):
            s = se.push(x)
            assert np.max(np.abs(s.l.data - f.l.data)) <= 1e-12
            assert np.array_equal(s.z.data, f.z.data)
            assert all(len(c) <= tiny_enc.temporal_window for c in se.caches.values())


class TestProject:
    def test_shuffle_groups_are_2x2_blocks(self):
        g = shuffle_groups(4, 6)
        assert g.shape == (6, 4)
        assert g[0].tolist() == [0, 1, 6, 7] and g[1].tolist() == [2, 3, 8, 9] and g[3].tolist() == [12, 13, 18, 19]

    def test_pixel_shuffle_layout(self):
        x = Tensor(np.arange(16 * 2, dtype=float).reshape(16, 2))
        y = pixel_shuffle(x, 4, 4).data
        assert y.shape == (4, 8)
        assert y[0].tolist() == [0, 1, 2, 3, 8, 9, 10, 11]

    def test_counts(self, tiny_enc, trained):
        _, ps = trained
        (f,) = encode(video(tiny_enc, 1), ps.bind(), tiny_enc)
        assert f.l.shape == (2, tiny_enc.llm_dim) and f.z.shape == (4, tiny_enc.llm_dim)

    def test_zero_input_zero_output(self, tiny_enc):
        ps = init_dual_path(init_base_encoder(tiny_enc, 0), tiny_enc, 0)
        for pid in ("vit.projector_Z.b", "vit.projector_L.b"):
            ps.set_value(pid, np.zeros(tiny_enc.llm_dim))
        z = Tensor(np.zeros((16, 16)))
        l, zz = project(FrameState(0, 0.0, z, Tensor(np.zeros((8, 16)))), ps.bind(), tiny_enc)
        assert not l.data.any() and not zz.data.any()

    def test_indivisible(self, tiny_enc, trained):
        _, ps = trained
        with pytest.raises(ShapeError):
            project(FrameState(0, 0.0, Tensor(np.zeros((16, 16))), Tensor(np.zeros((6, 16)))), ps.bind(), tiny_enc)


class TestEncode:
    def test_shapes_small(self):
        cfg = EncoderConfig(depth=2, hidden_dim=8, heads=2, grid_h=4, grid_w=4, n_vit=4,
                            temporal_depth=1, mlp_dim=8, pixel_dim=3, llm_dim=5)
        ps = init_dual_path(init_base_encoder(cfg, 0), cfg, 0)
        (f,) = encode(video(cfg, 1), ps.bind(), cfg)
        assert f.l.shape == (1, 5) and f.z.shape == (4, 5)

    def test_removing_standby_reproduces_base(self, tiny_enc, trained):
        base, ps = trained
        px = video(tiny_enc, 3)
        no_standby = encode(px, ps.bind(), tiny_enc, standby=False)
        for a, b in zip(no_standby, base_encode(px, base, tiny_enc)):
            assert a.l is None and np.array_equal(a.z.data, b.z.data)

    def test_sixteen_frames_group_independence(self):
        cfg = EncoderConfig(depth=2, hidden_dim=8, heads=2, grid_h=2, grid_w=2, n_vit=4,
                            temporal_depth=2, temporal_window=8, mlp_dim=8, pixel_dim=3, llm_dim=4)
        ps = init_dual_path(init_base_encoder(cfg, 0), cfg, 0)
        randomize_new(ps, 1)
        px = video(cfg, 16)
        full = encode(px, ps.bind(), cfg)
        head = encode(px[:8], ps.bind(), cfg)
        for a, b in zip(full[:8], head):
            assert np.array_equal(a.l.data, b.l.data) and np.array_equal(a.z.data, b.z.data)
        px2 = list(px)
        px2[3] = px2[3] * -2.0
        later = encode(px2, ps.bind(), cfg)
        for a, b in zip(full[8:], later[8:]):
            assert np.array_equal(a.l.data, b.l.data)

    def test_bad_pixels(self, tiny_enc, trained):
        _, ps = trained
        with pytest.raises(ShapeError):
            encode([np.zeros((3, 3))], ps.bind(), tiny_enc)

    def test_attention_weights_shape(self, tiny_enc, trained):
        _, ps = trained
        (f,) = encode(video(tiny_enc, 1), ps.bind(), tiny_enc, want_weights=True)
        assert f.standby_attention.shape == (2, 8, 8 + 16)
        np.testing.assert_allclose(f.standby_attention.sum(-1), 1.0, atol=1e-12)

    def test_full_gradient_vs_finite_differences(self):
        cfg = EncoderConfig(depth=2, hidden_dim=8, heads=2, grid_h=2, grid_w=2, n_vit=4,
                            temporal_depth=1, temporal_window=2, mlp_dim=8, pixel_dim=3, llm_dim=4)
        ps = init_dual_path(init_base_encoder(cfg, 0), cfg, 0)
        randomize_new(ps, 5, 0.2)
        px = video(cfg, 2, seed=6)
        target = np.random.default_rng(7).standard_normal((1, 4))

        def loss(P):
            out = encode(px, P, cfg)
            total = None
            for f in out:
                d = f.l - Tensor(target) + f.z.mean(axis=0, keepdims=True)
                term = (d * d).sum()
                total = term if total is None else total + term
            return total

        assert finite_diff_check(loss, ps) <= 1e-4
