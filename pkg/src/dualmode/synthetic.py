"""Seeded synthetic videos: Gaussian patch "pixels" plus a slow low-rank drift."""

from __future__ import annotations

import numpy as np


def make_video(seed: int, frames: int, n_patches: int, pixel_dim: int, rank: int = 2,
               drift: float = 1.0, noise: float = 1.0, fps: float = 2.0):
    """Returns (list of (n_patches, pixel_dim) arrays, timestamps in seconds).

    Each frame is i.i.d. noise plus ``sum_r sin(w_r t + phi_r) * u_r v_r^T``,
    so consecutive frames share structure that temporal attention can use.
    """
    if frames < 0:
        raise ValueError("frame count must be non-negative")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((rank, n_patches, 1))
    v = rng.standard_normal((rank, 1, pixel_dim))
    omega = rng.uniform(0.2, 0.8, size=rank)
    phase = rng.uniform(0.0, 2 * np.pi, size=rank)
    video = []
    for t in range(frames):
        px = noise * rng.standard_normal((n_patches, pixel_dim))
        for r in range(rank):
            px = px + drift * np.sin(omega[r] * t + phase[r]) * (u[r] * v[r])
        video.append(px)
    timestamps = [t / fps for t in range(frames)]
    return video, timestamps


def caption_matrix(seed: int, pixel_dim: int, vocab: int) -> np.ndarray:
    """Fixed linear read-out scoring caption tokens 1..vocab-1 from mean patch pixels."""
    return np.random.default_rng(seed).standard_normal((pixel_dim, vocab - 1))


def caption_tokens(video, C: np.ndarray) -> list[int]:
    """One token per frame: 1 + argmax over the read-out of the frame's mean patch."""
    return [1 + int(np.argmax(np.asarray(px).mean(axis=0) @ C)) for px in video]
