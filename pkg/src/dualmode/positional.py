"""Rotary position embeddings (1D and axial 2D) and standby-token position sampling.

Channel pairs are consecutive: (x[2i], x[2i+1]) is rotated by the i-th
frequency ``base ** (-2i / dim)``. In 2D mode the first half of the head
dimension is rotated by the row coordinate and the second half by the column
coordinate, each half carrying its own 1D frequency ladder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import DTYPE, Tensor, _pair_swap, rotary


@dataclass(frozen=True)
class Position2D:
    row: float
    col: float


@dataclass(frozen=True)
class RotaryConfig:
    head_dim: int
    base: float = 10000.0
    mode: str = "1d"

    def __post_init__(self):
        if self.mode not in ("1d", "2d"):
            raise ConfigError(f"rotary mode must be '1d' or '2d', got {self.mode!r}")
        if self.head_dim <= 0:
            raise ConfigError("rotary head dimension must be positive")
        if self.mode == "1d" and self.head_dim % 2:
            raise ConfigError(f"1D rotary needs an even head dimension, got {self.head_dim}")
        if self.mode == "2d" and self.head_dim % 4:
            raise ConfigError(f"2D rotary needs a head dimension divisible by 4, got {self.head_dim}")


def _angles(positions: np.ndarray, dim: int, base: float) -> np.ndarray:
    inv_freq = 1.0 / (base ** (np.arange(0, dim, 2, dtype=DTYPE) / dim))
    return positions[..., None] * inv_freq


def rope_tables(positions, cfg: RotaryConfig) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables with a trailing ``head_dim`` axis.

    1D positions have shape (...,); 2D positions have shape (..., 2) as (row, col).
    """
    pos = np.asarray(positions, dtype=DTYPE)
    if cfg.mode == "1d":
        ang = _angles(pos, cfg.head_dim, cfg.base)
    else:
        if pos.shape[-1:] != (2,):
            raise ShapeError(f"2D rotary positions need a trailing axis of 2, got {pos.shape}")
        half = cfg.head_dim // 2
        ang = np.concatenate([_angles(pos[..., 0], half, cfg.base),
                              _angles(pos[..., 1], half, cfg.base)], axis=-1)
    ang = np.repeat(ang, 2, axis=-1)
    return np.cos(ang), np.sin(ang)


def apply_rotary(x, cos: np.ndarray, sin: np.ndarray):
    """Works on Tensors (recorded, differentiable) and on plain arrays."""
    if isinstance(x, Tensor):
        return rotary(x, cos, sin)
    x = np.asarray(x, dtype=DTYPE)
    return x * cos + _pair_swap(x) * sin


def _check_last(x, cfg: RotaryConfig) -> None:
    if x.shape[-1] != cfg.head_dim:
        raise ShapeError(f"last extent {x.shape[-1]} != rotary head dimension {cfg.head_dim}")


def rotate_1d(x, position, cfg: RotaryConfig):
    """Rotate ``x`` (..., head_dim) by a scalar position or one position per row."""
    if cfg.mode != "1d":
        raise ConfigError("rotate_1d needs a 1D rotary config")
    _check_last(x, cfg)
    cos, sin = rope_tables(np.asarray(position, dtype=DTYPE), cfg)
    return apply_rotary(x, cos, sin)


def _as_position_array(position) -> np.ndarray:
    if isinstance(position, Position2D):
        return np.array([position.row, position.col], dtype=DTYPE)
    if isinstance(position, (list, tuple)) and position and isinstance(position[0], Position2D):
        return positions_to_array(position)
    return np.asarray(position, dtype=DTYPE)


def rotate_2d(x, position, cfg: RotaryConfig):
    """Rotate ``x`` by a Position2D, a list of them (one per row), or an (N, 2) array."""
    if cfg.mode != "2d":
        raise ConfigError("rotate_2d needs a 2D rotary config")
    _check_last(x, cfg)
    cos, sin = rope_tables(_as_position_array(position), cfg)
    return apply_rotary(x, cos, sin)


def positions_to_array(positions: Sequence[Position2D]) -> np.ndarray:
    return np.array([[p.row, p.col] for p in positions], dtype=DTYPE).reshape(-1, 2)


def patch_positions(grid_h: int, grid_w: int) -> list[Position2D]:
    """Integer grid coordinates of the patch tokens in row-major order."""
    return [Position2D(float(r), float(c)) for r in range(grid_h) for c in range(grid_w)]


def sample_standby_positions(grid_h: int, grid_w: int, n: int) -> list[Position2D]:
    """Centres of a row-major ``r x c`` lattice over the grid, truncated to ``n`` cells.

    ``r = ceil(sqrt(n))`` and ``c = ceil(n / r)``; cell (i_r, i_c) sits at
    ``((i_r + 0.5) * grid_h / r, (i_c + 0.5) * grid_w / c)``.
    """
    if grid_h < 1 or grid_w < 1:
        raise ShapeError(f"grid must be non-empty, got {grid_h}x{grid_w}")
    if n < 1:
        raise ShapeError(f"need at least one standby token, got {n}")
    if n > grid_h * grid_w:
        raise ShapeError(f"cannot place {n} standby tokens on a {grid_h}x{grid_w} grid")
    r = math.isqrt(n - 1) + 1  # ceil(sqrt(n))
    c = -(-n // r)
    return [Position2D((i // c + 0.5) * grid_h / r, (i % c + 0.5) * grid_w / c) for i in range(n)]
