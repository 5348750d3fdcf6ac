"""Training-free pruning of original visual tokens by standby-token attention.

Scores live at pixel-shuffle-group granularity: the ``o/4`` groups are the 2x2
patch blocks that the projector merges, numbered row-major over the
``(grid_h/2, grid_w/2)`` block grid, so a retained group maps to exactly one
projected ``z`` token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, shuffle_groups
from .errors import ShapeError


@dataclass(frozen=True)
class GroupScore:
    group: int
    score: float


def standby_to_patch(att: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Slice the (heads, n_vit, n_vit + o) standby weights down to their patch columns.

    Arrays already shaped (heads, n_vit, o) pass through.
    """
    att = np.asarray(att, dtype=float)
    if att.ndim != 3 or att.shape[1] != cfg.n_vit:
        raise ShapeError(f"attention must be (heads, {cfg.n_vit}, keys), got {att.shape}")
    if att.shape[2] == cfg.n_vit + cfg.o:
        return att[:, :, cfg.n_vit:]
    if att.shape[2] == cfg.o:
        return att
    raise ShapeError(f"key axis {att.shape[2]} is neither o={cfg.o} nor n_vit+o={cfg.n_vit + cfg.o}")


def compute_group_scores(att: np.ndarray, cfg: EncoderConfig) -> list[GroupScore]:
    """Mean weight received by each 2x2 group, over heads, standby queries and the group's 4 keys."""
    a = standby_to_patch(att, cfg)
    per_key = a.mean(axis=(0, 1))
    groups = shuffle_groups(cfg.grid_h, cfg.grid_w)
    return [GroupScore(g, float(per_key[idx].mean())) for g, idx in enumerate(groups)]


def retained_group_count(n_groups: int, m_percent: float) -> int:
    # decimal keeps e.g. m=30, G=10 at exactly 3 instead of 3.0000000000000004 -> 4
    k = math.ceil(Decimal(repr(float(m_percent))) * n_groups / 100)
    return min(max(k, 1), n_groups)


def prune_top_m(scores, m_percent: float) -> list[int]:
    """Group indices (ascending) of the top ``ceil(m% * G)`` scores; ties favour lower indices."""
    if not 0 < m_percent <= 100:
        raise ValueError(f"m_percent must lie in (0, 100], got {m_percent!r}")
    vals = [s.score if isinstance(s, GroupScore) else float(s) for s in scores]
    if not vals:
        raise ValueError("no scores to prune")
    k = retained_group_count(len(vals), m_percent)
    order = sorted(range(len(vals)), key=lambda g: (-vals[g], g))
    return sorted(order[:k])


def retained_tokens(groups: list[int], cfg: EncoderConfig) -> np.ndarray:
    """Patch indices covered by the retained groups (4 per group)."""
    return np.sort(shuffle_groups(cfg.grid_h, cfg.grid_w)[groups].reshape(-1))


def average_pool(tokens: np.ndarray, factor: int = 4) -> np.ndarray:
    """Reference baseline: mean over consecutive runs of ``factor`` tokens."""
    tokens = np.asarray(tokens, dtype=float)
    if tokens.shape[0] % factor:
        raise ShapeError(f"{tokens.shape[0]} tokens not divisible by pool factor {factor}")
    return tokens.reshape(tokens.shape[0] // factor, factor, *tokens.shape[1:]).mean(axis=1)


def export_attention_map(att: np.ndarray, cfg: EncoderConfig, top_fraction: float) -> np.ndarray:
    """(n_vit, grid_h, grid_w) head-averaged weights, zeroed outside each token's top cells.

    Each standby token keeps ``ceil(top_fraction * o)`` cells; equal weights go
    to the lower patch index.
    """
    if not 0 < top_fraction <= 1:
        raise ValueError(f"top_fraction must lie in (0, 1], got {top_fraction!r}")
    a = standby_to_patch(att, cfg).mean(axis=0)
    keep = min(cfg.o, math.ceil(Decimal(repr(float(top_fraction))) * cfg.o))
    out = np.zeros_like(a)
    for t in range(cfg.n_vit):
        top = np.lexsort((np.arange(cfg.o), -a[t]))[:keep]
        out[t, top] = a[t, top]
    return out.reshape(cfg.n_vit, cfg.grid_h, cfg.grid_w)


def write_attention_maps(maps: np.ndarray, out_dir: str | Path, pgm: bool = False) -> list[Path]:
    """One CSV per standby token (``attn_token{t:03d}.csv``), plus ``.pgm`` renderings if asked."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for t, grid in enumerate(maps):
        path = out_dir / f"attn_token{t:03d}.csv"
        path.write_text("".join(",".join(repr(float(x)) for x in row) + "\n" for row in grid))
        written.append(path)
        if pgm:
            written.append(write_pgm(grid, out_dir / f"attn_token{t:03d}.pgm"))
    return written


def write_pgm(grid: np.ndarray, path: str | Path) -> Path:
    """Binary P5 greyscale image, scaled so the largest cell is 255."""
    grid = np.asarray(grid, dtype=float)
    peak = grid.max()
    pix = np.zeros(grid.shape, dtype=np.uint8) if peak <= 0 else np.round(255 * grid / peak).astype(np.uint8)
    h, w = pix.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    return path
