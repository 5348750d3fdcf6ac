from fractions import Fraction

import numpy as np
import pytest

from dualmode.encoder import EncoderConfig, encode, init_base_encoder, init_dual_path
from dualmode.errors import ShapeError
from dualmode.pruning import (
    average_pool,
    compute_group_scores,
    export_attention_map,
    prune_top_m,
    retained_group_count,
    retained_tokens,
    write_attention_maps,
    write_pgm,
)

CFG = EncoderConfig(depth=1, hidden_dim=8, heads=2, grid_h=4, grid_w=6, n_vit=8, temporal_depth=0,
                    mlp_dim=8, pixel_dim=3, llm_dim=4)


def brute_scores(att, cfg):
    H, n, o = att.shape
    gw = cfg.grid_w // 2
    out = []
    for g in range(o // 4):
        br, bc = divmod(g, gw)
        members = [(2 * br + dr) * cfg.grid_w + 2 * bc + dc for dr in (0, 1) for dc in (0, 1)]
        s = 0.0
        for h in range(H):
            for q in range(n):
                for k in members:
                    s += att[h, q, k]
        out.append(s / (H * n * 4))
    return out


def brute_keep(scores, m):
    G = len(scores)
    k = -(-Fraction(m).limit_denominator(10 ** 9) * G // 100)
    k = max(1, min(G, int(k)))
    keep = []
    for g in range(G):
        better = sum(1 for h in range(G) if scores[h] > scores[g] or (scores[h] == scores[g] and h < g))
        if better < k:
            keep.append(g)
    return keep


def random_attention(seed, cfg=CFG, keys=None):
    rng = np.random.default_rng(seed)
    keys = cfg.o if keys is None else keys
    a = rng.random((cfg.heads, cfg.n_vit, keys))
    return a / a.sum(-1, keepdims=True)


class TestScores:
    def test_uniform(self):
        att = np.full((2, 8, 24), 1 / 24)
        s = [g.score for g in compute_group_scores(att, CFG)]
        assert len(s) == 6 and max(s) == min(s)

    def test_one_key(self):
        att = np.zeros((2, 8, 24))
        att[:, :, 7] = 1.0
        s = [g.score for g in compute_group_scores(att, CFG)]
        # patch 7 = row 1, col 1 -> block (0, 0)
        assert s[0] == 0.25 and all(x == 0 for x in s[1:])

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force(self, seed):
        att = random_attention(seed)
        got = [g.score for g in compute_group_scores(att, CFG)]
        assert np.max(np.abs(np.array(got) - brute_scores(att, CFG))) <= 1e-12

    def test_full_key_axis_sliced(self):
        att = random_attention(0, keys=CFG.n_vit + CFG.o)
        a = [g.score for g in compute_group_scores(att, CFG)]
        b = [g.score for g in compute_group_scores(att[:, :, CFG.n_vit:], CFG)]
        assert a == b

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            compute_group_scores(np.ones((2, 3, 24)), CFG)
        with pytest.raises(ShapeError):
            compute_group_scores(np.ones((2, 8, 25)), CFG)

    def test_from_encoder_final_layer(self):
        ps = init_dual_path(init_base_encoder(CFG, 0), CFG, 0)
        px = [np.random.default_rng(1).standard_normal((24, 3))]
        (f,) = encode(px, ps.bind(), CFG, want_weights=True)
        s = compute_group_scores(f.standby_attention, CFG)
        assert all(g.score >= 0 and np.isfinite(g.score) for g in s)


class TestPrune:
    def test_half(self):
        kept = prune_top_m(np.arange(10.0), 50)
        assert kept == [5, 6, 7, 8, 9] and 4 * len(kept) == 20

    def test_all(self):
        assert prune_top_m([1.0, 1.0, 0.5], 100) == [0, 1, 2]

    def test_ties_lower_index(self):
        assert prune_top_m([1.0, 1.0, 1.0, 1.0], 50) == [0, 1]

    def test_thirty_percent_of_ten_is_three(self):
        assert retained_group_count(10, 30) == 3
        assert retained_group_count(10, 0.1) == 1

    @pytest.mark.parametrize("seed", range(20))
    def test_oracle(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.integers(0, 4, int(rng.integers(1, 30))) / 4.0
        for m in (30, 12.5, 50, 99.9):
            assert prune_top_m(scores, m) == brute_keep(list(scores), m)

    def test_bad_m(self):
        with pytest.raises(ValueError):
            prune_top_m([1.0], 0)
        with pytest.raises(ValueError):
            prune_top_m([], 50)

    def test_tokens(self):
        assert retained_tokens([0, 5], CFG).tolist() == [0, 1, 6, 7, 16, 17, 22, 23]

    def test_average_pool(self):
        x = np.arange(8.0).reshape(8, 1)
        assert average_pool(x).ravel().tolist() == [1.5, 5.5]
        with pytest.raises(ShapeError):
            average_pool(np.ones((6, 1)))


class TestExport:
    def test_full_fraction(self):
        att = random_attention(2)
        maps = export_attention_map(att, CFG, 1.0)
        assert maps.shape == (8, 4, 6)
        assert np.max(np.abs(maps.reshape(8, -1).sum(-1) - 1)) <= 1e-12

    def test_ten_percent_of_100(self):
        cfg = EncoderConfig(depth=1, hidden_dim=8, heads=2, grid_h=10, grid_w=10, n_vit=4,
                            temporal_depth=0, mlp_dim=8, pixel_dim=3, llm_dim=4)
        maps = export_attention_map(random_attention(3, cfg), cfg, 0.1)
        assert all(np.count_nonzero(m) == 10 for m in maps)

    def test_uniform_keeps_lowest_indices(self):
        cfg = EncoderConfig(depth=1, hidden_dim=8, heads=2, grid_h=10, grid_w=10, n_vit=4,
                            temporal_depth=0, mlp_dim=8, pixel_dim=3, llm_dim=4)
        maps = export_attention_map(np.full((2, 4, 100), 0.01), cfg, 0.1)
        for m in maps:
            assert np.flatnonzero(m).tolist() == list(range(10))

    def test_files(self, tmp_path):
        maps = export_attention_map(random_attention(4), CFG, 0.25)
        files = write_attention_maps(maps, tmp_path, pgm=True)
        assert (tmp_path / "attn_token000.csv").exists() and (tmp_path / "attn_token007.pgm").exists()
        assert len(files) == 16
        rows = (tmp_path / "attn_token003.csv").read_text().splitlines()
        assert len(rows) == 4 and all(len(r.split(",")) == 6 for r in rows)
        np.testing.assert_array_equal(np.array([[float(x) for x in r.split(",")] for r in rows]), maps[3])

    def test_pgm_header(self, tmp_path):
        p = write_pgm(np.array([[0.0, 1.0], [0.5, 0.25]]), tmp_path / "x.pgm")
        blob = p.read_bytes()
        assert blob.startswith(b"P5\n2 2\n255\n") and blob[-4:] == bytes([0, 255, 128, 64])

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            export_attention_map(random_attention(0), CFG, 0)
