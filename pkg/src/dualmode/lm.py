"""Small causal language model consuming projected visual tokens plus text ids.

Visual tokens enter as embeddings of width ``hidden``; text ids go through
``lm.embed``. Every token gets an explicit 1D rotary position, so a KV cache
can keep the positions of tokens that were prefilled earlier even after other
cached entries are removed.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import (
    Bound,
    CausalMask,
    ParameterSet,
    Tensor,
    concat,
    gelu,
    layer_norm,
    masked_attention,
)
from .positional import RotaryConfig, apply_rotary, rope_tables

BOS = 0


@dataclass(frozen=True)
class LMConfig:
    depth: int = 2
    hidden: int = 32
    heads: int = 2
    ffn: int = 64
    vocab: int = 16
    rope_base: float = 10000.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"lm {f.name} must be positive")
        if self.vocab < 2:
            raise ConfigError("vocab needs BOS plus at least one caption token")
        if self.hidden % self.heads or (self.hidden // self.heads) % 2:
            raise ConfigError(f"hidden={self.hidden}/heads={self.heads} must give an even head dim")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def init_lm(cfg: LMConfig, seed: int = 0) -> ParameterSet:
    """Random frozen stand-in for a pretrained LM."""
    rng = np.random.default_rng(seed)
    d, f = cfg.hidden, cfg.ffn
    ps = ParameterSet()

    def add(pid, value):
        ps.add(pid, value, trainable=False, group="original")

    add("lm.embed", rng.standard_normal((cfg.vocab, d)))
    for i in range(cfg.depth):
        a = f"lm.block{i}.attn."
        add(a + "ln.g", np.ones(d))
        add(a + "ln.b", np.zeros(d))
        for name in ("q", "k", "v", "o"):
            add(f"{a}w{name}", rng.standard_normal((d, d)) / np.sqrt(d))
            add(f"{a}b{name}", np.zeros(d))
        m = f"lm.block{i}.mlp."
        add(m + "ln.g", np.ones(d))
        add(m + "ln.b", np.zeros(d))
        add(m + "w1", rng.standard_normal((d, f)) / np.sqrt(d))
        add(m + "b1", np.zeros(f))
        add(m + "w2", rng.standard_normal((f, d)) / np.sqrt(f))
        add(m + "b2", np.zeros(d))
    add("lm.ln_f.g", np.ones(d))
    add("lm.ln_f.b", np.zeros(d))
    add("lm.head", rng.standard_normal((d, cfg.vocab)) / np.sqrt(d))
    return ps


class KVCache:
    """Per-layer rotated keys and values, plus a tag per cached token.

    Tags are arbitrary hashables; the streaming module uses (frame_id, kind).
    """

    def __init__(self, depth: int):
        self.keys: list[np.ndarray | None] = [None] * depth
        self.values: list[np.ndarray | None] = [None] * depth
        self.tags: list = []
        self.positions: list[float] = []

    def __len__(self) -> int:
        return len(self.tags)

    def remove(self, predicate) -> int:
        """Drop every cached token whose tag satisfies ``predicate``; returns the count."""
        keep = np.array([not predicate(t) for t in self.tags], dtype=bool)
        removed = int((~keep).sum())
        if removed == 0:
            return 0
        for i in range(len(self.keys)):
            if self.keys[i] is not None:
                if keep.any():
                    self.keys[i] = self.keys[i][:, keep]
                    self.values[i] = self.values[i][:, keep]
                else:
                    self.keys[i] = self.values[i] = None
        self.tags = [t for t, k in zip(self.tags, keep) if k]
        self.positions = [p for p, k in zip(self.positions, keep) if k]
        return removed


def _heads(x: Tensor, h: int) -> Tensor:
    n, d = x.shape
    return x.reshape(n, h, d // h).transpose(1, 0, 2)


def embed_text(P: Bound, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    return P["lm.embed"][ids]


def lm_forward(P: Bound, cfg: LMConfig, x: Tensor, positions, cache: KVCache | None = None,
               tags=None) -> Tensor:
    """Logits (N, vocab) for input embeddings ``x`` (N, hidden).

    With a cache, ``x`` is a new chunk that attends to everything cached plus
    itself causally, and its keys/values are appended under ``tags``.
    """
    if x.ndim != 2 or x.shape[1] != cfg.hidden:
        raise ShapeError(f"lm input must be (N, {cfg.hidden}), got {x.shape}")
    pos = np.asarray(positions, dtype=float)
    n = x.shape[0]
    if pos.shape != (n,):
        raise ShapeError(f"{n} tokens but {pos.shape} positions")
    if cache is not None:
        tags = [None] * n if tags is None else list(tags)
        if len(tags) != n:
            raise ShapeError("one tag per token required")
    cos, sin = rope_tables(pos, RotaryConfig(cfg.head_dim, cfg.rope_base, "1d"))
    n_past = 0 if cache is None else len(cache)
    mask = CausalMask(n_past)
    h = x
    for i in range(cfg.depth):
        a = f"lm.block{i}.attn."
        hn = layer_norm(h, P[a + "ln.g"], P[a + "ln.b"])
        q = apply_rotary(_heads(hn @ P[a + "wq"] + P[a + "bq"], cfg.heads), cos, sin)
        k = apply_rotary(_heads(hn @ P[a + "wk"] + P[a + "bk"], cfg.heads), cos, sin)
        v = _heads(hn @ P[a + "wv"] + P[a + "bv"], cfg.heads)
        if cache is not None:
            if cache.keys[i] is not None:
                k_all = concat([Tensor(cache.keys[i]), k], axis=1)
                v_all = concat([Tensor(cache.values[i]), v], axis=1)
            else:
                k_all, v_all = k, v
            cache.keys[i], cache.values[i] = k_all.data, v_all.data
        else:
            k_all, v_all = k, v
        att = masked_attention(q, k_all, v_all, mask)
        h = h + att.transpose(1, 0, 2).reshape(n, cfg.hidden) @ P[a + "wo"] + P[a + "bo"]
        m = f"lm.block{i}.mlp."
        hn = layer_norm(h, P[m + "ln.g"], P[m + "ln.b"])
        h = h + gelu(hn @ P[m + "w1"] + P[m + "b1"]) @ P[m + "w2"] + P[m + "b2"]
    if cache is not None:
        cache.tags.extend(tags)
        cache.positions.extend(pos.tolist())
    h = layer_norm(h, P["lm.ln_f.g"], P["lm.ln_f.b"])
    return h @ P["lm.head"]
