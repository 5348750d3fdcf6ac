"""Analytic token, FLOP and KV-cache accounting.

FLOPs count a multiply-add as 2. For a sequence of ``L`` tokens through one
dense block of width ``h`` with ``H`` query heads of size ``dh``::

    linear    = 2 * L * (h*H*dh + 2*h*kv_heads*dh + H*dh*h + mlp_matrices*h*ffn)
    quadratic = attention_fraction * 4 * L^2 * H * dh        (scores + weighted sum)

``attention_fraction`` is 0.5 for causal attention counted as half the square
and 1.0 for full-square counting. All arithmetic on counts is in Python ints
until the fraction is applied, so linearity checks are exact.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from decimal import ROUND_HALF_EVEN, Decimal
from fractions import Fraction

from .errors import ConfigError

BASELINE_FRAMES = 64
BASELINE_TOKENS_PER_FRAME = 324
BASELINE_TOTAL = BASELINE_FRAMES * BASELINE_TOKENS_PER_FRAME


@dataclass(frozen=True)
class ArchSpec:
    layers: int
    hidden: int
    heads: int
    kv_heads: int = 0          # 0 -> same as heads
    ffn: int = 0               # 0 -> 4 * hidden
    mlp_matrices: int = 2
    head_dim: int = 0          # 0 -> hidden // heads
    vocab: int = 0
    attention_fraction: float = 0.5

    def __post_init__(self):
        if self.kv_heads == 0:
            object.__setattr__(self, "kv_heads", self.heads)
        if self.ffn == 0:
            object.__setattr__(self, "ffn", 4 * self.hidden)
        if self.head_dim == 0 and self.heads > 0:
            object.__setattr__(self, "head_dim", self.hidden // self.heads)
        for name in ("layers", "hidden", "heads", "kv_heads", "ffn", "mlp_matrices", "head_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"arch field {name} must be positive, got {getattr(self, name)}")
        if self.vocab < 0:
            raise ConfigError("vocab must be non-negative")
        if self.heads % self.kv_heads:
            raise ConfigError(f"kv_heads={self.kv_heads} must divide heads={self.heads}")
        if not 0 < self.attention_fraction <= 1:
            raise ConfigError("attention_fraction must lie in (0, 1]")

    @property
    def block_params(self) -> int:
        h, q = self.hidden, self.heads * self.head_dim
        kv = self.kv_heads * self.head_dim
        return h * q + 2 * h * kv + q * h + self.mlp_matrices * h * self.ffn


def _check_count(**kw) -> None:
    for k, v in kw.items():
        if v < 0:
            raise ValueError(f"{k} must be non-negative, got {v}")


def linear_flops(arch: ArchSpec, tokens: int) -> int:
    _check_count(tokens=tokens)
    return 2 * tokens * arch.layers * arch.block_params + 2 * tokens * arch.hidden * arch.vocab


def attention_flops(arch: ArchSpec, tokens: int, keys: int | None = None) -> float:
    """Score and aggregation FLOPs for ``tokens`` queries over ``keys`` keys (default: square)."""
    _check_count(tokens=tokens)
    keys = tokens if keys is None else keys
    return float(Fraction(arch.attention_fraction) * 4 * tokens * keys * arch.layers * arch.heads * arch.head_dim)


def encoder_flops(arch: ArchSpec, frames: int, tokens_per_frame: int, standby_per_frame: int = 0,
                  temporal_layers: int = 0, window: int = 8) -> float:
    """Per-frame encoder cost times ``frames``.

    Attention is per frame. Temporal attention over standby tokens is charged
    at full window capacity for every frame, keeping the total linear.
    """
    _check_count(frames=frames, tokens_per_frame=tokens_per_frame, standby_per_frame=standby_per_frame)
    n = tokens_per_frame + standby_per_frame
    per_frame = Fraction(linear_flops(arch, n)) + Fraction(arch.attention_fraction) * 4 * n * n * arch.layers * arch.heads * arch.head_dim
    if temporal_layers and standby_per_frame:
        h = arch.hidden
        proj = 2 * standby_per_frame * 4 * h * h
        att = 4 * standby_per_frame * (window * standby_per_frame) * h
        per_frame += temporal_layers * (proj + att)
    return float(per_frame * frames)


@dataclass(frozen=True)
class PrefillFlops:
    linear: int
    quadratic: float

    @property
    def total(self) -> float:
        return self.linear + self.quadratic


def lm_prefill_flops(arch: ArchSpec, sequence_length: int) -> PrefillFlops:
    return PrefillFlops(linear_flops(arch, sequence_length), attention_flops(arch, sequence_length))


def kv_footprint(arch: ArchSpec, sequence_length: int, bytes_per_value: int = 2) -> int:
    """2 (K and V) * layers * kv_heads * head_dim * length * bytes."""
    _check_count(sequence_length=sequence_length)
    if bytes_per_value <= 0:
        raise ValueError("bytes_per_value must be positive")
    return 2 * arch.layers * arch.kv_heads * arch.head_dim * sequence_length * bytes_per_value


def max_batch(budget_bytes: int, per_request_bytes: int) -> int:
    if per_request_bytes <= 0:
        raise ValueError("per-request footprint must be positive")
    return int(budget_bytes // per_request_bytes)


def percent_label(ratio_percent: float, decimals: int | None = None) -> str:
    """'2.5%'-style label: two significant figures when the leading digit is 1 or 2, else one."""
    if ratio_percent < 0:
        raise ValueError("ratio must be non-negative")
    d = Decimal(repr(float(ratio_percent)))
    if d == 0:
        return "0%"
    if decimals is not None:
        q = d.quantize(Decimal(1).scaleb(-decimals), rounding=ROUND_HALF_EVEN)
    else:
        lead = int(str(d.normalize().as_tuple().digits[0]))
        sig = 2 if lead in (1, 2) else 1
        exp = d.adjusted() - sig + 1
        q = d.quantize(Decimal(1).scaleb(exp), rounding=ROUND_HALF_EVEN)
    text = format(q.normalize(), "f")
    return f"{text}%"


@dataclass(frozen=True)
class TokenCount:
    total: int
    ratio_percent: float

    @property
    def label(self) -> str:
        return percent_label(self.ratio_percent)


def token_count(frames: int, tokens_per_frame: int, baseline_total: int = BASELINE_TOTAL) -> TokenCount:
    _check_count(frames=frames, tokens_per_frame=tokens_per_frame)
    total = frames * tokens_per_frame
    return TokenCount(total, 100.0 * total / baseline_total)


@dataclass(frozen=True)
class CostReport:
    frames: int
    standby_tokens: int
    focus_tokens: int
    encoder_flops: float
    prefill_linear: int
    prefill_quadratic: float
    prefill_total: float
    kv_bytes_per_request: int
    max_concurrent: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = [f.name for f in fields(self)]
        w.writerow(names)
        w.writerow([repr(getattr(self, n)) for n in names])
        return buf.getvalue()


def cost_report(vit: ArchSpec, lm: ArchSpec, frames: int, tokens_per_frame: int, visual_tokens: int,
                standby_tokens: int, focus_tokens: int, memory_bytes: int, bytes_per_value: int = 2) -> CostReport:
    pre = lm_prefill_flops(lm, visual_tokens)
    kv = kv_footprint(lm, visual_tokens, bytes_per_value)
    return CostReport(frames, standby_tokens, focus_tokens, encoder_flops(vit, frames, tokens_per_frame),
                      pre.linear, pre.quadratic, pre.total, kv,
                      max_batch(memory_bytes, kv) if kv else 0)


TERA = 1e12


def tera(x: float) -> float:
    return x / TERA


def ratio(a: float, b: float) -> float:
    if b == 0:
        return math.inf
    return a / b
