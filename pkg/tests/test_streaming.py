import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualmode.errors import BudgetError
from dualmode.lm import LMConfig, init_lm
from dualmode.numerics import Tensor
from dualmode.streaming import (
    BlockKind,
    CacheState,
    detach_vs_reprefill_compare,
    ingest_frame,
    plan_budget,
    query_view,
    replay_retained_tags,
    streaming_token_total,
)


def check_invariants(state: CacheState, ingested: list[int]) -> None:
    assert state.local_tokens <= state.local_budget and state.bank_tokens <= state.bank_budget
    local = [f.frame_id for f in state.local]
    bank = [b.frame_id for b in state.bank]
    assert local == sorted(set(local)) and bank == sorted(set(bank))
    assert not bank or not local or bank[-1] < local[0]
    assert sorted(local + bank + state.dropped) == sorted(ingested)


class TestIngest:
    def test_three_frames(self):
        s = CacheState(2 * (8 + 324), math.inf)
        for q in (1, 2, 3):
            ingest_frame(s, q, 8, 324)
        assert [f.frame_id for f in s.local] == [2, 3]
        assert [(b.frame_id, b.kind, b.token_count) for b in s.bank] == [(1, BlockKind.STANDBY, 8)]
        assert query_view(s, 5).labels == ["S1", "S2", "F2", "S3", "F3", "text"]

    def test_steady_window(self):
        s = CacheState(4096, 28672)
        for q in range(60):
            s.ingest(q, 8, 324)
        assert len(s.local) == 4096 // 332 == 12

    def test_zero_bank(self):
        s = CacheState(332, 0)
        for q in range(5):
            s.ingest(q, 8, 324)
        assert s.dropped_frames == 4 and s.bank == [] and s.dropped == [0, 1, 2, 3]

    def test_frame_too_big(self):
        with pytest.raises(BudgetError):
            CacheState(100).ingest(0, 8, 324)

    def test_ids_increase(self):
        s = CacheState(1000)
        s.ingest(3, 8, 4)
        with pytest.raises(ValueError):
            s.ingest(3, 8, 4)

    def test_positions_keep_gaps(self):
        s = CacheState(2 * 12)
        for q in range(3):
            s.ingest(q, 8, 4)
        assert [(b.label, b.start) for b in s.blocks()] == [("S0", 0), ("S1", 12), ("F1", 20), ("S2", 24), ("F2", 32)]

    def test_event_log(self):
        s = CacheState(12, 8)
        for q in range(3):
            s.ingest(q, 8, 4)
        lines = [json.loads(x) for x in s.event_log().splitlines()]
        assert [(e["event"], e["frame_id"]) for e in lines] == [
            ("ingest", 0), ("ingest", 1), ("detach", 0), ("migrate", 0),
            ("ingest", 2), ("detach", 1), ("migrate", 1), ("drop", 0)]
        assert lines[-1]["bank_tokens"] == 8 and lines[-1]["local_tokens"] == 12

    def test_empty_view(self):
        v = query_view(CacheState(10), 3)
        assert v.labels == ["text"] and v.total_tokens == 3

    def test_status(self):
        s = CacheState(12, 8)
        for q in range(3):
            s.ingest(q, 8, 4)
        assert [s.status(q) for q in range(4)] == ["dropped", "bank", "local", "unknown"]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 40), st.integers(1, 400), st.integers(0, 200), st.integers(0, 60),
       st.data())
def test_state_machine_properties(n_llm, o_s, extra_local, bank_budget, frames, data):
    local = n_llm + o_s + extra_local
    s = CacheState(local, bank_budget)
    ids, q = [], 0
    for _ in range(frames):
        q += data.draw(st.integers(1, 3))
        s.ingest(q, n_llm, o_s)
        ids.append(q)
        check_invariants(s, ids)
    kept, view = replay_retained_tags(ids, local, bank_budget, n_llm, o_s)
    assert kept == view


def test_standby_persists_until_bank_overflow():
    s = CacheState(3 * 12, math.inf)
    for q in range(10):
        s.ingest(q, 4, 8)
    labels = query_view(s).labels
    assert all(f"S{q}" in labels for q in range(10))
    assert [f"F{q}" in labels for q in range(10)] == [False] * 7 + [True] * 3


class TestCompare:
    lm = LMConfig(depth=2, hidden=8, heads=2, ffn=8, vocab=6)

    def blocks(self, n, seed=0):
        rng = np.random.default_rng(seed)
        return ([Tensor(rng.standard_normal((2, 8))) for _ in range(n)],
                [Tensor(rng.standard_normal((4, 8))) for _ in range(n)])

    def test_single_frame_identical(self):
        P = init_lm(self.lm, 0).bind()
        l, z = self.blocks(1)
        rep = detach_vs_reprefill_compare(l, z, P, self.lm, 12, 8, [0, 1])
        assert rep.retained_equal and rep.max_logit_divergence == 0.0

    def test_twenty_frames_finite(self):
        P = init_lm(self.lm, 0).bind()
        l, z = self.blocks(20, 1)
        rep = detach_vs_reprefill_compare(l, z, P, self.lm, 24, 16, [0, 1, 2])
        assert rep.retained_equal and np.isfinite(rep.max_logit_divergence)
        # bank holds 8 standby blocks of 2, local holds 4 whole frames of 6
        tail = [t for q in range(16, 20) for t in ((q, "S"), (q, "F"))]
        assert rep.retained == [(q, "S") for q in range(8, 16)] + tail
        assert rep.max_logit_divergence > 0


class TestPlan:
    def test_reference_numbers(self):
        p = plan_budget(32768, 4096, 2, 8, 324)
        assert abs(p.focus_seconds - 6.17) < 0.01
        assert p.bank_seconds == 1792.0
        assert abs(p.baseline_seconds - 50.57) < 0.01
        assert 35 <= p.memory_multiplier < 40

    @pytest.mark.parametrize("args", [(32768, 4096, 0, 8, 324), (100, 200, 2, 8, 324), (0, 0, 2, 8, 324)])
    def test_errors(self, args):
        with pytest.raises(BudgetError):
            plan_budget(*args)

    def test_totals(self):
        assert streaming_token_total(248, 8, 8) == 3200
        assert streaming_token_total(504, 8, 8) == 5248
        assert streaming_token_total(248, 8, 16) == 5248
        assert streaming_token_total(504, 8, 16, 144) == 9344
        assert streaming_token_total(0, 0, 8, 144) == 0
