"""Dual-path vision encoder with standby tokens.

Every frame carries two token streams through the same stack of blocks:

* ``Z``: the original patch tokens, processed exactly as the base encoder
  processes them (shared attention restricted to ``Z`` keys, ``mlp_Z``,
  ``projector_Z``);
* ``L``: the standby tokens, which attend to every key of their frame, pass
  through duplicated ``mlp_L`` weights, and, in the last ``temporal_depth``
  blocks, through a causal temporal attention across groups of up to
  ``temporal_window`` consecutive frames.

The asymmetric mask is never materialised. Original queries are computed
against original keys only, with the very same operations the base encoder
runs, so the ``Z`` path is bit-identical to the base encoder by construction,
whatever values the new parameters take.

Parameter ids::

    vit.patch_embed.{w,b}
    vit.block{i}.attn.{ln.g,ln.b,wq,bq,wk,bk,wv,bv,wo,bo}     original
    vit.block{i}.mlp_Z.{ln.g,ln.b,w1,b1,w2,b2}                original
    vit.block{i}.mlp_L.{...}                                  new (copy of mlp_Z)
    vit.block{i}.temporal.{ln.g,ln.b,wq,bq,...,wo,bo}         new, last T blocks
    vit.projector_Z.{w,b}                                     original
    vit.projector_L.{w,b}                                     new (copy of projector_Z)
    vit.standby                                               new, (n_vit, d)
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import (
    AsymmetricMask,
    BlockCausalMask,
    Bound,
    ParameterSet,
    Tensor,
    concat,
    gelu,
    layer_norm,
    masked_attention,
)
from .positional import (
    RotaryConfig,
    apply_rotary,
    patch_positions,
    positions_to_array,
    rope_tables,
    sample_standby_positions,
)

SHUFFLE = 4

ATTN_KEYS = ("ln.g", "ln.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
MLP_KEYS = ("ln.g", "ln.b", "w1", "b1", "w2", "b2")

__all__ = [
    "AsymmetricMask",
    "EncoderConfig",
    "FrameState",
    "ProjectedFrame",
    "StreamingEncoder",
    "base_encode",
    "encode",
    "encode_layer",
    "init_base_encoder",
    "init_dual_path",
    "project",
    "temporal_attend",
]


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 6
    hidden_dim: int = 32
    heads: int = 2
    grid_h: int = 8
    grid_w: int = 8
    n_vit: int = 32
    temporal_depth: int = 5
    temporal_window: int = 8
    shuffle_factor: int = SHUFFLE
    mlp_dim: int = 64
    pixel_dim: int = 24
    llm_dim: int = 32
    rope_base: float = 10000.0
    temporal_norm: bool = True

    def __post_init__(self):
        positive = ("depth", "hidden_dim", "heads", "grid_h", "grid_w", "n_vit",
                    "temporal_window", "mlp_dim", "pixel_dim", "llm_dim")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.shuffle_factor != SHUFFLE:
            raise ConfigError(f"shuffle_factor is fixed at {SHUFFLE}")
        if self.n_vit % SHUFFLE:
            raise ConfigError(f"n_vit={self.n_vit} must be divisible by {SHUFFLE}")
        if self.grid_h % 2 or self.grid_w % 2:
            raise ConfigError(f"pixel shuffle merges 2x2 patches; grid {self.grid_h}x{self.grid_w} must be even")
        if self.n_vit > self.o:
            raise ConfigError(f"n_vit={self.n_vit} exceeds the {self.o} patch positions available")
        if not 0 <= self.temporal_depth <= self.depth:
            raise ConfigError(f"temporal_depth={self.temporal_depth} must lie in [0, depth={self.depth}]")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim={self.hidden_dim} not divisible by heads={self.heads}")
        if self.head_dim % 4:
            raise ConfigError(f"head_dim={self.head_dim} must be divisible by 4 for 2D rotary")

    @property
    def o(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def n_llm(self) -> int:
        return self.n_vit // SHUFFLE

    @property
    def o_s(self) -> int:
        return self.o // SHUFFLE

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    def is_temporal(self, i: int) -> bool:
        return i >= self.depth - self.temporal_depth

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class FrameState:
    """Per-frame token streams between encoder blocks.

    ``L`` is None when the frame is run through the base (standby-free) encoder.
    """

    frame_index: int
    timestamp: float
    Z: Tensor
    L: Tensor | None = None


@dataclass
class ProjectedFrame:
    frame_index: int
    timestamp: float
    z: Tensor
    l: Tensor | None = None
    standby_attention: np.ndarray | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _attn_prefix(i: int) -> str:
    return f"vit.block{i}.attn."


def init_base_encoder(cfg: EncoderConfig, seed: int = 0) -> ParameterSet:
    """Random stand-in for a pretrained encoder: patch embedding, blocks, projector_Z."""
    rng = np.random.default_rng(seed)
    d, h = cfg.hidden_dim, cfg.mlp_dim
    ps = ParameterSet()

    def add(pid, value):
        ps.add(pid, value, trainable=False, group="original")

    def norm_pair(prefix):
        add(prefix + "ln.g", 1.0 + 0.1 * rng.standard_normal(d))
        add(prefix + "ln.b", 0.1 * rng.standard_normal(d))

    add("vit.patch_embed.w", rng.standard_normal((cfg.pixel_dim, d)) / np.sqrt(cfg.pixel_dim))
    add("vit.patch_embed.b", 0.02 * rng.standard_normal(d))
    for i in range(cfg.depth):
        a = _attn_prefix(i)
        norm_pair(a)
        for name in ("q", "k", "v", "o"):
            add(f"{a}w{name}", rng.standard_normal((d, d)) / np.sqrt(d))
            add(f"{a}b{name}", 0.02 * rng.standard_normal(d))
        m = f"vit.block{i}.mlp_Z."
        norm_pair(m)
        add(m + "w1", rng.standard_normal((d, h)) / np.sqrt(d))
        add(m + "b1", 0.02 * rng.standard_normal(h))
        add(m + "w2", rng.standard_normal((h, d)) / np.sqrt(h))
        add(m + "b2", 0.02 * rng.standard_normal(d))
    add("vit.projector_Z.w", rng.standard_normal((SHUFFLE * d, cfg.llm_dim)) / np.sqrt(SHUFFLE * d))
    add("vit.projector_Z.b", 0.02 * rng.standard_normal(cfg.llm_dim))
    return ps


def _expected_base_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.hidden_dim, cfg.mlp_dim
    shapes = {"vit.patch_embed.w": (cfg.pixel_dim, d), "vit.patch_embed.b": (d,)}
    for i in range(cfg.depth):
        a = _attn_prefix(i)
        shapes[a + "ln.g"] = shapes[a + "ln.b"] = (d,)
        for name in ("q", "k", "v", "o"):
            shapes[f"{a}w{name}"] = (d, d)
            shapes[f"{a}b{name}"] = (d,)
        m = f"vit.block{i}.mlp_Z."
        shapes.update({m + "ln.g": (d,), m + "ln.b": (d,), m + "w1": (d, h), m + "b1": (h,),
                       m + "w2": (h, d), m + "b2": (d,)})
    shapes["vit.projector_Z.w"] = (SHUFFLE * d, cfg.llm_dim)
    shapes["vit.projector_Z.b"] = (cfg.llm_dim,)
    return shapes


def init_dual_path(base: ParameterSet, cfg: EncoderConfig, seed: int = 0) -> ParameterSet:
    """Add the standby path to a base encoder.

    Original parameters are frozen. ``mlp_L`` and ``projector_L`` start as bit
    copies of their originals, temporal attention copies the block's attention
    weights except for a zero output projection (so it starts as the identity
    residual), and the standby embeddings are drawn from N(0, 0.02^2).
    """
    for pid, shape in _expected_base_shapes(cfg).items():
        if pid not in base:
            raise ShapeError(f"base encoder lacks parameter {pid!r}")
        if base[pid].value.shape != shape:
            raise ShapeError(f"{pid}: base shape {base[pid].value.shape} != config shape {shape}")

    ps = ParameterSet()
    for p in base:
        ps.add(p.id, p.value, trainable=False, group="original")

    def dup(src, dst):
        ps.add(dst, base[src].value.copy(), trainable=True, group="new")

    for i in range(cfg.depth):
        for key in MLP_KEYS:
            dup(f"vit.block{i}.mlp_Z.{key}", f"vit.block{i}.mlp_L.{key}")
    for i in range(cfg.depth):
        if not cfg.is_temporal(i):
            continue
        t = f"vit.block{i}.temporal."
        for key in ATTN_KEYS:
            if key in ("wo", "bo"):
                ps.add(t + key, np.zeros_like(base[_attn_prefix(i) + key].value), trainable=True, group="new")
            else:
                dup(_attn_prefix(i) + key, t + key)
    dup("vit.projector_Z.w", "vit.projector_L.w")
    dup("vit.projector_Z.b", "vit.projector_L.b")
    rng = np.random.default_rng(seed)
    ps.add("vit.standby", 0.02 * rng.standard_normal((cfg.n_vit, cfg.hidden_dim)), trainable=True, group="new")
    return ps


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _spatial_tables(cfg: EncoderConfig):
    rot = RotaryConfig(cfg.head_dim, cfg.rope_base, "2d")
    z = rope_tables(positions_to_array(patch_positions(cfg.grid_h, cfg.grid_w)), rot)
    l = rope_tables(positions_to_array(sample_standby_positions(cfg.grid_h, cfg.grid_w, cfg.n_vit)), rot)
    return z, l


def _temporal_tables(cfg: EncoderConfig, offsets: np.ndarray):
    return rope_tables(np.repeat(offsets.astype(float), cfg.n_vit), RotaryConfig(cfg.head_dim, cfg.rope_base, "1d"))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _qkv(P: Bound, prefix: str, x: Tensor, heads: int, tables):
    cos, sin = tables
    q = _split_heads(x @ P[prefix + "wq"] + P[prefix + "bq"], heads)
    k = _split_heads(x @ P[prefix + "wk"] + P[prefix + "bk"], heads)
    v = _split_heads(x @ P[prefix + "wv"] + P[prefix + "bv"], heads)
    return apply_rotary(q, cos, sin), apply_rotary(k, cos, sin), v


def _mlp(P: Bound, prefix: str, x: Tensor) -> Tensor:
    h = layer_norm(x, P[prefix + "ln.g"], P[prefix + "ln.b"])
    return x + gelu(h @ P[prefix + "w1"] + P[prefix + "b1"]) @ P[prefix + "w2"] + P[prefix + "b2"]


def mlp_path(P: Bound, i: int, x: Tensor, path: str) -> Tensor:
    """Apply block ``i``'s MLP sublayer of ``path`` ('Z' or 'L') to ``x``."""
    if path not in ("Z", "L"):
        raise ValueError(f"path must be 'Z' or 'L', got {path!r}")
    return _mlp(P, f"vit.block{i}.mlp_{path}.", x)


def attention_block(P: Bound, i: int, state: FrameState, cfg: EncoderConfig, want_weights: bool = False):
    """Shared attention of block ``i``; returns (L', Z', standby weights or None)."""
    a = _attn_prefix(i)
    (z_tab, l_tab) = _spatial_tables(cfg)
    g, b = P[a + "ln.g"], P[a + "ln.b"]

    zn = layer_norm(state.Z, g, b)
    qz, kz, vz = _qkv(P, a, zn, cfg.heads, z_tab)
    z_att = masked_attention(qz, kz, vz)
    Z1 = state.Z + _merge_heads(z_att) @ P[a + "wo"] + P[a + "bo"]
    if state.L is None:
        return None, Z1, None

    ln = layer_norm(state.L, g, b)
    ql, kl, vl = _qkv(P, a, ln, cfg.heads, l_tab)
    res = masked_attention(ql, concat([kl, kz], axis=1), concat([vl, vz], axis=1),
                           return_weights=want_weights)
    l_att, weights = res if want_weights else (res, None)
    L1 = state.L + _merge_heads(l_att) @ P[a + "wo"] + P[a + "bo"]
    return L1, Z1, weights


def temporal_attend(group: list[Tensor], i: int, P: Bound, cfg: EncoderConfig) -> list[Tensor]:
    """Block-causal temporal attention over the standby tokens of one frame group.

    Frame t sees the tokens of frames 0..t of the group; all tokens of a frame
    share the temporal rotary position t.
    """
    if not cfg.is_temporal(i):
        raise ValueError(f"block {i} has no temporal attention")
    m = len(group)
    if not 1 <= m <= cfg.temporal_window:
        raise ShapeError(f"temporal group of {m} frames; window allows 1..{cfg.temporal_window}")
    t = f"vit.block{i}.temporal."
    x = concat(group, axis=0)
    h = layer_norm(x, P[t + "ln.g"], P[t + "ln.b"]) if cfg.temporal_norm else x
    q, k, v = _qkv(P, t, h, cfg.heads, _temporal_tables(cfg, np.arange(m)))
    att = masked_attention(q, k, v, BlockCausalMask((cfg.n_vit,) * m))
    out = x + _merge_heads(att) @ P[t + "wo"] + P[t + "bo"]
    n = cfg.n_vit
    return [out[f * n:(f + 1) * n] for f in range(m)]


class TemporalCache:
    """Keys/values of earlier frames of the current group, for one temporal block."""

    def __init__(self):
        self.keys: list[Tensor] = []
        self.values: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.keys)

    def clear(self) -> None:
        self.keys.clear()
        self.values.clear()


def temporal_step(cache: TemporalCache, L1: Tensor, i: int, P: Bound, cfg: EncoderConfig) -> Tensor:
    """Streaming form of :func:`temporal_attend` for the next frame of a group."""
    offset = len(cache)
    if offset >= cfg.temporal_window:
        raise ShapeError("temporal cache already holds a full window; clear it first")
    t = f"vit.block{i}.temporal."
    h = layer_norm(L1, P[t + "ln.g"], P[t + "ln.b"]) if cfg.temporal_norm else L1
    q, k, v = _qkv(P, t, h, cfg.heads, _temporal_tables(cfg, np.array([offset])))
    cache.keys.append(k)
    cache.values.append(v)
    att = masked_attention(q, concat(cache.keys, axis=1), concat(cache.values, axis=1))
    return L1 + _merge_heads(att) @ P[t + "wo"] + P[t + "bo"]


def encode_layer(i: int, states: list[FrameState], P: Bound, cfg: EncoderConfig,
                 want_weights: bool = False):
    """Run block ``i`` over all frames; returns (new states, per-frame standby weights)."""
    if not 0 <= i < cfg.depth:
        raise IndexError(f"layer {i} outside 0..{cfg.depth - 1}")
    mids = [attention_block(P, i, s, cfg, want_weights) for s in states]
    L1 = [m[0] for m in mids]
    if cfg.is_temporal(i) and states and states[0].L is not None:
        k = cfg.temporal_window
        L2: list[Tensor] = []
        for start in range(0, len(states), k):
            L2.extend(temporal_attend(L1[start:start + k], i, P, cfg))
        L1 = L2
    out = []
    for s, (_, Z1, _), Lmid in zip(states, mids, L1):
        Z2 = mlp_path(P, i, Z1, "Z")
        L2 = None if Lmid is None else mlp_path(P, i, Lmid, "L")
        out.append(FrameState(s.frame_index, s.timestamp, Z2, L2))
    return out, [m[2] for m in mids]


def pixel_shuffle(x: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """(h*w, d) row-major patches -> (h*w/4, 4d): each row concatenates one 2x2 block."""
    d = x.shape[-1]
    y = x.reshape(grid_h // 2, 2, grid_w // 2, 2, d).transpose(0, 2, 1, 3, 4)
    return y.reshape(grid_h * grid_w // 4, 4 * d)


def shuffle_groups(grid_h: int, grid_w: int) -> np.ndarray:
    """Patch indices of each pixel-shuffle group, shape (o/4, 4), groups row-major."""
    idx = np.arange(grid_h * grid_w).reshape(grid_h // 2, 2, grid_w // 2, 2).transpose(0, 2, 1, 3)
    return idx.reshape(-1, 4)


def project(state: FrameState, P: Bound, cfg: EncoderConfig) -> tuple[Tensor | None, Tensor]:
    """Projector: 2x2 pixel shuffle on Z, consecutive lattice quadruples on L."""
    if state.Z.shape[0] % SHUFFLE or (state.L is not None and state.L.shape[0] % SHUFFLE):
        raise ShapeError("token counts must be divisible by 4 for the projector")
    z = pixel_shuffle(state.Z, cfg.grid_h, cfg.grid_w) @ P["vit.projector_Z.w"] + P["vit.projector_Z.b"]
    if state.L is None:
        return None, z
    n, d = state.L.shape
    l = state.L.reshape(n // SHUFFLE, SHUFFLE * d) @ P["vit.projector_L.w"] + P["vit.projector_L.b"]
    return l, z


def embed_frames(pixels: list[np.ndarray], P: Bound, cfg: EncoderConfig, standby: bool = True,
                 timestamps=None) -> list[FrameState]:
    states = []
    for q, px in enumerate(pixels):
        px = np.asarray(px, dtype=float)
        if px.shape != (cfg.o, cfg.pixel_dim):
            raise ShapeError(f"frame {q}: pixel array {px.shape} != ({cfg.o}, {cfg.pixel_dim})")
        Z = Tensor(px) @ P["vit.patch_embed.w"] + P["vit.patch_embed.b"]
        L = P["vit.standby"] if standby else None
        ts = float(q) if timestamps is None else float(timestamps[q])
        states.append(FrameState(q, ts, Z, L))
    return states


def run_encoder(pixels: list[np.ndarray], P: Bound, cfg: EncoderConfig, standby: bool = True,
                timestamps=None, want_weights: bool = False):
    """All blocks, no projector. Returns (final states, last-block standby weights)."""
    states = embed_frames(pixels, P, cfg, standby, timestamps)
    weights = [None] * len(states)
    for i in range(cfg.depth):
        states, weights = encode_layer(i, states, P, cfg, want_weights and i == cfg.depth - 1)
    return states, weights


def encode(pixels: list[np.ndarray], P: Bound, cfg: EncoderConfig, standby: bool = True,
           timestamps=None, want_weights: bool = False) -> list[ProjectedFrame]:
    """Full forward: embedding, all blocks, projector. Differentiable end to end.

    ``want_weights`` attaches the final block's standby attention weights,
    shape (heads, n_vit, n_vit + o), to each frame.
    """
    states, weights = run_encoder(pixels, P, cfg, standby, timestamps, want_weights)
    out = []
    for s, w in zip(states, weights):
        l, z = project(s, P, cfg)
        out.append(ProjectedFrame(s.frame_index, s.timestamp, z, l, w))
    return out


def base_encode(pixels: list[np.ndarray], base: ParameterSet | Bound, cfg: EncoderConfig,
                timestamps=None) -> list[ProjectedFrame]:
    """The original encoder on its own: no standby tokens, original parameters only."""
    P = base.bind() if isinstance(base, ParameterSet) else base
    return encode(pixels, P, cfg, standby=False, timestamps=timestamps)


class StreamingEncoder:
    """Frame-at-a-time encoder that keeps a temporal key/value cache per temporal block.

    The cache is cleared every ``temporal_window`` frames, which reproduces the
    non-overlapping grouping of the batch encoder.
    """

    def __init__(self, params: ParameterSet | Bound, cfg: EncoderConfig):
        self.P = params.bind() if isinstance(params, ParameterSet) else params
        self.cfg = cfg
        self.caches = {i: TemporalCache() for i in range(cfg.depth) if cfg.is_temporal(i)}
        self.frames_seen = 0

    def push(self, pixels: np.ndarray, timestamp: float | None = None) -> ProjectedFrame:
        cfg, P = self.cfg, self.P
        if self.frames_seen % cfg.temporal_window == 0:
            for c in self.caches.values():
                c.clear()
        ts = float(self.frames_seen) if timestamp is None else timestamp
        (state,) = embed_frames([pixels], P, cfg, True, [ts])
        state.frame_index = self.frames_seen
        for i in range(cfg.depth):
            L1, Z1, _ = attention_block(P, i, state, cfg)
            if i in self.caches:
                L1 = temporal_step(self.caches[i], L1, i, P, cfg)
            state = FrameState(state.frame_index, ts, mlp_path(P, i, Z1, "Z"), mlp_path(P, i, L1, "L"))
        self.frames_seen += 1
        l, z = project(state, P, cfg)
        return ProjectedFrame(state.frame_index, ts, z, l)
