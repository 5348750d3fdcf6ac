import numpy as np
import pytest

from dualmode.encoder import ProjectedFrame
from dualmode.errors import ShapeError
from dualmode.modes import (
    ModeSelector,
    assemble,
    assemble_original,
    format_seconds,
    serialize_prompt,
    visual_token_total,
)
from dualmode.numerics import Tensor


def frames(n, n_llm=8, o_s=324, d=2):
    return [ProjectedFrame(q, q / 2, Tensor(np.full((o_s, d), q + 0.5)), Tensor(np.full((n_llm, d), -q - 0.5)))
            for q in range(n)]


class TestAssemble:
    def test_standby_64_frames(self):
        inp = assemble(ModeSelector.STANDBY, frames(64))
        assert inp.n_visual == 512 == visual_token_total(ModeSelector.STANDBY, 64, 8, 324)

    def test_focus_64_frames(self):
        inp = assemble(ModeSelector.FOCUS, frames(64))
        assert inp.n_visual == 64 * (324 + 8) == 21248

    def test_order_and_positions(self):
        inp = assemble("focus", frames(2, n_llm=2, o_s=3), text=[1, 2])
        kinds = [(s.kind, s.frame_index, s.length) for s in inp.segments]
        assert kinds == [("l", 0, 2), ("z", 0, 3), ("l", 1, 2), ("z", 1, 3), ("text", None, 2)]
        assert inp.positions.tolist() == list(range(12))
        assert inp.visual.data[:2, 0].tolist() == [-0.5, -0.5] and inp.visual.data[2, 0] == 0.5

    def test_text_only(self):
        inp = assemble(ModeSelector.STANDBY, [], text=[3, 4])
        assert inp.visual is None and len(inp) == 2

    def test_empty(self):
        with pytest.raises(ShapeError):
            assemble(ModeSelector.FOCUS, [], [])

    def test_unordered(self):
        f = frames(2)
        with pytest.raises(ValueError):
            assemble(ModeSelector.STANDBY, [f[1], f[0]])

    def test_original_only(self):
        inp = assemble_original(frames(3, o_s=4))
        assert inp.n_visual == 12 and all(s.kind == "z" for s in inp.segments)

    def test_missing_standby(self):
        f = ProjectedFrame(0, 0.0, Tensor(np.ones((4, 2))), None)
        with pytest.raises(ShapeError):
            assemble(ModeSelector.STANDBY, [f])

    def test_parse(self):
        assert ModeSelector.parse("FOCUS") is ModeSelector.FOCUS
        with pytest.raises(ValueError):
            ModeSelector.parse("both")


class TestSerialize:
    def test_reference_pattern(self):
        assert serialize_prompt([1, 2.5, 4], 2) == "Video of 2 fps:1<frame1>2.5<frame2>4<frame3>"

    def test_prefix_only(self):
        assert serialize_prompt([], 0.5) == "Video of 0.5 fps:"

    @pytest.mark.parametrize("t,s", [(2.0, "2"), (0.0, "0"), (2.50, "2.5"), (0.1, "0.1"), (100.0, "100"),
                                     (1e-7, "0.0000001"), (12.125, "12.125")])
    def test_minimal_form(self, t, s):
        assert format_seconds(t) == s

    def test_vision_tags(self):
        out = serialize_prompt([0.5], 1, vision_tags=True)
        assert out == "Video of 1 fps:0.5<|vision_start|><frame1><|vision_end|>"

    def test_negative(self):
        with pytest.raises(ValueError):
            serialize_prompt([-1.0], 2)

    def test_decreasing(self):
        with pytest.raises(ValueError):
            serialize_prompt([2.0, 1.0], 2)

    def test_bad_fps(self):
        with pytest.raises(ValueError):
            serialize_prompt([1.0], 0)

    def test_injective_on_samples(self):
        seen = {}
        rng = np.random.default_rng(0)
        for _ in range(300):
            n = int(rng.integers(0, 4))
            ts = tuple(sorted(np.round(rng.random(n) * 10, int(rng.integers(0, 3))).tolist()))
            fps = float(rng.choice([0.5, 1, 2, 2.5]))
            key = serialize_prompt(ts, fps)
            assert seen.setdefault(key, (fps, ts)) == (fps, ts)
            assert serialize_prompt(ts, fps) == key
