"""Streaming memory: a focus local window plus a standby memory bank.

Each ingested frame contributes a standby block (``n_llm`` tokens) and a
focus-original block (``o_s`` tokens) to the local window. When the window
overflows, its oldest frame loses the focus block and its standby block moves
to the bank; when the bank overflows, its oldest frame is dropped. Budgets
count visual tokens only.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import BudgetError
from .lm import KVCache, LMConfig, embed_text, lm_forward
from .numerics import Bound, Tensor, concat

DEFAULT_FOCUS_EXTRA = 144


class BlockKind(enum.Enum):
    FOCUS_ORIGINAL = "FocusOriginal"
    STANDBY = "Standby"

    @property
    def short(self) -> str:
        return "F" if self is BlockKind.FOCUS_ORIGINAL else "S"


@dataclass(frozen=True)
class CacheBlock:
    frame_id: int
    kind: BlockKind
    token_count: int
    start: int
    length: int

    def __post_init__(self):
        if self.token_count <= 0 or self.length != self.token_count:
            raise BudgetError(f"block for frame {self.frame_id} needs a positive count matching its span")

    @property
    def label(self) -> str:
        return f"{self.kind.short}{self.frame_id}"

    @property
    def tag(self) -> tuple[int, str]:
        return (self.frame_id, self.kind.short)


@dataclass(frozen=True)
class LocalFrame:
    standby: CacheBlock
    focus: CacheBlock

    @property
    def frame_id(self) -> int:
        return self.standby.frame_id

    @property
    def tokens(self) -> int:
        return self.standby.token_count + self.focus.token_count


@dataclass(frozen=True)
class Event:
    event: str          # ingest | detach | migrate | drop
    frame_id: int
    kind: str
    tokens: int
    local_tokens: int
    bank_tokens: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class CacheState:
    """Single-owner state machine; see the module docstring for the transition rules."""

    def __init__(self, local_budget: float, bank_budget: float = math.inf):
        if local_budget <= 0 or bank_budget < 0:
            raise BudgetError(f"budgets must be local > 0 and bank >= 0, got {local_budget}, {bank_budget}")
        self.local_budget = local_budget
        self.bank_budget = bank_budget
        self.local: list[LocalFrame] = []
        self.bank: list[CacheBlock] = []
        self.next_position = 0
        self.dropped: list[int] = []
        self.events: list[Event] = []
        self.last_frame_id: int | None = None

    @property
    def dropped_frames(self) -> int:
        return len(self.dropped)

    @property
    def local_tokens(self) -> int:
        return sum(f.tokens for f in self.local)

    @property
    def bank_tokens(self) -> int:
        return sum(b.token_count for b in self.bank)

    def _log(self, event, frame_id, kind, tokens) -> Event:
        e = Event(event, frame_id, kind, tokens, self.local_tokens, self.bank_tokens)
        self.events.append(e)
        return e

    def ingest(self, frame_id: int, n_llm: int, o_s: int) -> list[Event]:
        """Add one frame; returns the events it caused, in order."""
        if self.last_frame_id is not None and frame_id <= self.last_frame_id:
            raise ValueError(f"frame ids must increase strictly: {frame_id} after {self.last_frame_id}")
        if n_llm <= 0 or o_s <= 0:
            raise BudgetError("per-frame token counts must be positive")
        if n_llm + o_s > self.local_budget:
            raise BudgetError(f"one frame needs {n_llm + o_s} tokens; local budget is {self.local_budget}")
        self.last_frame_id = frame_id
        start = len(self.events)
        p = self.next_position
        frame = LocalFrame(CacheBlock(frame_id, BlockKind.STANDBY, n_llm, p, n_llm),
                           CacheBlock(frame_id, BlockKind.FOCUS_ORIGINAL, o_s, p + n_llm, o_s))
        self.next_position = p + n_llm + o_s
        self.local.append(frame)
        self._log("ingest", frame_id, "Frame", frame.tokens)
        while self.local_tokens > self.local_budget:
            old = self.local.pop(0)
            self._log("detach", old.frame_id, BlockKind.FOCUS_ORIGINAL.value, old.focus.token_count)
            self.bank.append(old.standby)
            self._log("migrate", old.frame_id, BlockKind.STANDBY.value, old.standby.token_count)
        while self.bank_tokens > self.bank_budget:
            gone = self.bank.pop(0)
            self.dropped.append(gone.frame_id)
            self._log("drop", gone.frame_id, BlockKind.STANDBY.value, gone.token_count)
        self.check()
        return self.events[start:]

    def check(self) -> None:
        """Raise if any structural invariant is broken."""
        if self.local_tokens > self.local_budget or self.bank_tokens > self.bank_budget:
            raise BudgetError("budget exceeded")
        bank_ids = [b.frame_id for b in self.bank]
        local_ids = [f.frame_id for f in self.local]
        if any(b <= a for a, b in zip(bank_ids, bank_ids[1:])) or any(b <= a for a, b in zip(local_ids, local_ids[1:])):
            raise BudgetError("FIFO order violated")
        if bank_ids and local_ids and bank_ids[-1] >= local_ids[0]:
            raise BudgetError("bank frame not older than the local window")

    def status(self, frame_id: int) -> str:
        if any(f.frame_id == frame_id for f in self.local):
            return "local"
        if any(b.frame_id == frame_id for b in self.bank):
            return "bank"
        if frame_id in self.dropped:
            return "dropped"
        return "unknown"

    def blocks(self) -> list[CacheBlock]:
        out = list(self.bank)
        for f in self.local:
            out.extend((f.standby, f.focus))
        return out

    def event_log(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)


def ingest_frame(state: CacheState, frame_id: int, n_llm: int, o_s: int) -> CacheState:
    state.ingest(frame_id, n_llm, o_s)
    return state


@dataclass
class QueryView:
    blocks: list[CacheBlock]
    text_tokens: int = 0

    @property
    def labels(self) -> list[str]:
        return [b.label for b in self.blocks] + (["text"] if self.text_tokens else [])

    @property
    def visual_tokens(self) -> int:
        return sum(b.token_count for b in self.blocks)

    @property
    def total_tokens(self) -> int:
        return self.visual_tokens + self.text_tokens


def query_view(state: CacheState, text_tokens: int = 0) -> QueryView:
    """Decode-time context: bank blocks, then local-window blocks, then text."""
    return QueryView(state.blocks(), text_tokens)


# ---------------------------------------------------------------------------
# detach vs re-prefill
# ---------------------------------------------------------------------------


def replay_retained_tags(frame_ids: Sequence[int], local_budget, bank_budget, n_llm, o_s) -> tuple[set, set]:
    """(tags kept by replaying events on a cache, tags listed by the final view).

    The first mirrors the detach strategy, which edits its cache in place;
    the second is what a re-prefill from the final state would rebuild.
    """
    state = CacheState(local_budget, bank_budget)
    kept: list[tuple[int, str]] = []
    for q in frame_ids:
        for e in state.ingest(q, n_llm, o_s):
            if e.event == "ingest":
                kept += [(q, "S"), (q, "F")]
            elif e.event == "detach":
                kept.remove((e.frame_id, "F"))
            elif e.event == "drop":
                kept.remove((e.frame_id, "S"))
    return set(kept), {b.tag for b in query_view(state).blocks}


@dataclass
class CompareReport:
    retained_equal: bool
    retained: list[tuple[int, str]]
    max_logit_divergence: float
    logits_detach: np.ndarray = field(repr=False)
    logits_reprefill: np.ndarray = field(repr=False)


def detach_vs_reprefill_compare(standby: Sequence[Tensor], focus: Sequence[Tensor], P: Bound,
                                lm: LMConfig, local_budget, bank_budget, probe_text) -> CompareReport:
    """Run both streaming strategies on per-frame LM-side tokens and compare probe logits.

    Detach (A): prefill each frame incrementally at its original positions and
    delete cache entries as blocks are detached or dropped. Re-prefill (B):
    rebuild the cache from the retained blocks alone with compacted positions.
    """
    if len(standby) != len(focus):
        raise ValueError("need one standby and one focus block per frame")
    state = CacheState(local_budget, bank_budget)
    cache_a = KVCache(lm.depth)
    chunks: dict[tuple[int, str], Tensor] = {}
    for q, (l, z) in enumerate(zip(standby, focus)):
        n_llm, o_s = l.shape[0], z.shape[0]
        pos0 = state.next_position
        events = state.ingest(q, n_llm, o_s)
        chunks[(q, "S")], chunks[(q, "F")] = l, z
        lm_forward(P, lm, concat([l, z], axis=0), np.arange(pos0, pos0 + n_llm + o_s),
                   cache_a, [(q, "S")] * n_llm + [(q, "F")] * o_s)
        for e in events:
            if e.event == "detach":
                cache_a.remove(lambda t, f=e.frame_id: t == (f, "F"))
            elif e.event == "drop":
                cache_a.remove(lambda t, f=e.frame_id: t == (f, "S"))
    text = embed_text(P, probe_text)
    n_t = text.shape[0]
    logits_a = lm_forward(P, lm, text, np.arange(state.next_position, state.next_position + n_t),
                          cache_a, [("text", "T")] * n_t).data[-1]

    view = query_view(state)
    cache_b = KVCache(lm.depth)
    n = 0
    if view.blocks:
        ctx = concat([chunks[b.tag] for b in view.blocks], axis=0)
        n = ctx.shape[0]
        tags = [b.tag for b in view.blocks for _ in range(b.token_count)]
        lm_forward(P, lm, ctx, np.arange(n), cache_b, tags)
    logits_b = lm_forward(P, lm, text, np.arange(n, n + n_t), cache_b, [("text", "T")] * n_t).data[-1]

    kept_a = [t for t in dict.fromkeys(cache_a.tags) if t[0] != "text"]
    kept_b = [t for t in dict.fromkeys(cache_b.tags) if t[0] != "text"]
    return CompareReport(kept_a == kept_b, kept_a, float(np.max(np.abs(logits_a - logits_b))), logits_a, logits_b)


# ---------------------------------------------------------------------------
# budget arithmetic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BudgetPlan:
    total_budget: int
    local_budget: int
    bank_budget: int
    fps: float
    focus_tokens_per_frame: int
    standby_tokens_per_frame: int
    focus_seconds: float
    bank_seconds: float
    baseline_seconds: float
    memory_multiplier: float

    def rows(self) -> list[tuple[str, str]]:
        return [
            ("baseline_seconds", f"{self.baseline_seconds:.1f} s"),
            ("focus_seconds", f"{self.focus_seconds:.1f} s"),
            ("bank_seconds", f"{self.bank_seconds:.1f} s ({self.bank_seconds / 60:.1f} min)"),
            ("memory_multiplier", f"{self.memory_multiplier:.2f}x"),
        ]


def plan_budget(total: int, local: int, fps: float, n_llm: int, o_s: int) -> BudgetPlan:
    if fps <= 0:
        raise BudgetError(f"fps must be positive, got {fps!r}")
    if min(total, local, n_llm, o_s) <= 0:
        raise BudgetError("budgets and per-frame token counts must be positive")
    if local > total:
        raise BudgetError(f"local budget {local} exceeds total {total}")
    focus = local / ((n_llm + o_s) * fps)
    bank = (total - local) / (n_llm * fps)
    baseline = total / (o_s * fps)
    return BudgetPlan(total, local, total - local, fps, n_llm + o_s, n_llm,
                      focus, bank, baseline, (focus + bank) / baseline)


def streaming_token_total(standby_frames: int, focus_frames: int, n_llm: int,
                          focus_extra: int = DEFAULT_FOCUS_EXTRA) -> int:
    """(standby + focus frames) * n_llm + focus frames * focus_extra."""
    if min(standby_frames, focus_frames, n_llm, focus_extra) < 0:
        raise ValueError("counts must be non-negative")
    return (standby_frames + focus_frames) * n_llm + focus_frames * focus_extra


# (standby frames, focus frames, n_llm) for the four streaming configurations
STREAM_PRESETS = ((248, 8, 8), (504, 8, 8), (248, 8, 16), (504, 8, 16))
