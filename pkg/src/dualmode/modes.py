"""Standby/focus sequence assembly and prompt serialization."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from decimal import Decimal
from typing import Sequence

import numpy as np

from .encoder import ProjectedFrame
from .errors import ShapeError
from .lm import embed_text
from .numerics import Bound, Tensor, concat


class ModeSelector(enum.Enum):
    STANDBY = "standby"
    FOCUS = "focus"

    @classmethod
    def parse(cls, text: str) -> "ModeSelector":
        try:
            return cls(text.lower())
        except ValueError:
            raise ValueError(f"mode must be 'standby' or 'focus', got {text!r}") from None


@dataclass
class Segment:
    kind: str          # "l", "z" or "text"
    frame_index: int | None
    start: int
    length: int


@dataclass
class LMInput:
    visual: Tensor | None
    text: np.ndarray
    positions: np.ndarray
    segments: list[Segment]

    @property
    def n_visual(self) -> int:
        return 0 if self.visual is None else self.visual.shape[0]

    def __len__(self) -> int:
        return self.n_visual + len(self.text)

    def embeddings(self, P: Bound) -> Tensor:
        parts = [] if self.visual is None else [self.visual]
        if len(self.text):
            parts.append(embed_text(P, self.text))
        if not parts:
            raise ShapeError("empty LM input")
        return parts[0] if len(parts) == 1 else concat(parts, axis=0)


def _build(chunks: list[tuple[str, int | None, Tensor]], text) -> LMInput:
    text = np.asarray(list(text), dtype=np.int64)
    if not chunks and not len(text):
        raise ShapeError("nothing to assemble: no frames and no text")
    segments, pos = [], 0
    for kind, q, t in chunks:
        segments.append(Segment(kind, q, pos, t.shape[0]))
        pos += t.shape[0]
    if len(text):
        segments.append(Segment("text", None, pos, len(text)))
    visual = None
    if chunks:
        visual = concat([t for _, _, t in chunks], axis=0) if len(chunks) > 1 else chunks[0][2]
    return LMInput(visual, text, np.arange(pos + len(text), dtype=float), segments)


def _check_order(frames: Sequence[ProjectedFrame]) -> None:
    idx = [f.frame_index for f in frames]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ValueError(f"frames must be ordered by strictly increasing index, got {idx}")


def assemble(mode: ModeSelector, frames: Sequence[ProjectedFrame], text=()) -> LMInput:
    """Standby: l tokens of every frame. Focus: per frame l tokens then z tokens. Text last."""
    mode = ModeSelector.parse(mode) if isinstance(mode, str) else mode
    _check_order(frames)
    chunks = []
    for f in frames:
        if f.l is None:
            raise ShapeError(f"frame {f.frame_index} has no standby tokens")
        chunks.append(("l", f.frame_index, f.l))
        if mode is ModeSelector.FOCUS:
            chunks.append(("z", f.frame_index, f.z))
    return _build(chunks, text)


def assemble_original(frames: Sequence[ProjectedFrame], text=()) -> LMInput:
    """Original-token-only sequence: what the base model sees without standby tokens."""
    _check_order(frames)
    return _build([("z", f.frame_index, f.z) for f in frames], text)


def visual_token_total(mode: ModeSelector, n_frames: int, n_llm: int, o_s: int) -> int:
    return n_frames * (n_llm + (o_s if mode is ModeSelector.FOCUS else 0))


def format_seconds(t: float) -> str:
    """Shortest decimal form without trailing zeros: 2.0 -> '2', 2.50 -> '2.5'."""
    d = Decimal(repr(float(t))).normalize()
    s = format(d, "f")
    return "0" if s in ("-0", "0") else s


def serialize_prompt(timestamps: Sequence[float], fps: float, vision_tags: bool = False) -> str:
    """Chat-template video prefix: ``Video of {fps} fps:`` then ``{t}<frame{i}>`` per frame.

    With ``vision_tags`` each placeholder is wrapped as
    ``<|vision_start|><frame{i}><|vision_end|>``.
    """
    if not fps > 0:
        raise ValueError(f"fps must be positive, got {fps!r}")
    ts = [float(t) for t in timestamps]
    for i, t in enumerate(ts):
        if not np.isfinite(t) or t < 0:
            raise ValueError(f"timestamp {i} must be finite and non-negative, got {t!r}")
        if i and t < ts[i - 1]:
            raise ValueError(f"timestamps must be non-decreasing: {ts[i - 1]!r} then {t!r}")
    parts = [f"Video of {format_seconds(fps)} fps:"]
    for i, t in enumerate(ts, start=1):
        tag = f"<frame{i}>"
        if vision_tags:
            tag = f"<|vision_start|>{tag}<|vision_end|>"
        parts.append(format_seconds(t) + tag)
    return "".join(parts)
