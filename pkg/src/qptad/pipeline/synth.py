"""Synthetic stand-in for encoder features with exact annotations."""

from __future__ import annotations

import numpy as np

from ..rng import derive_rng
from .types import DEFAULT_FPS, DEFAULT_STRIDE, ActionInstance, FeatureSequence, VideoAnnotation


def class_template(class_id: int, length: int, D_in: int) -> np.ndarray:
    """``(length, D_in)`` pattern for one instance: a bump on channel ``class_id``.

    The bump is a boxcar modulated by a class-specific ripple so classes also
    differ in temporal profile, never dropping below 0.5 inside the span.
    """
    tau = (np.arange(length) + 0.5) / length
    freq = 1 + class_id % 3
    phase = (class_id // 3) * 0.7
    out = np.zeros((length, D_in))
    out[:, class_id] = 1.0 + 0.5 * np.sin(2 * np.pi * freq * tau + phase)
    return out


def synth_generate(seed: int, num_videos: int, K: int = 17, noise_level: float = 0.1, *,
                   D_in: int = 64, num_frames: int = 512, min_len: int = 2, max_len: int = 80,
                   stride: int = DEFAULT_STRIDE, fps: int = DEFAULT_FPS,
                   ) -> list[tuple[FeatureSequence, VideoAnnotation]]:
    """Deterministic videos of noise with non-overlapping class patterns.

    Instance lengths are drawn uniformly from ``[min_len, max_len]`` feature
    steps (clipped to the video).  Values are rounded to float32 so the
    in-memory features equal what the feature file stores.
    """
    if K > D_in:
        raise ValueError(f"K={K} classes need D_in >= K, got D_in={D_in}")
    if num_frames % stride:
        raise ValueError(f"num_frames={num_frames} must be a multiple of stride={stride}")
    if not 1 <= min_len <= max_len:
        raise ValueError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    rng = derive_rng(seed, "synth")
    T = num_frames // stride
    out = []
    for v in range(num_videos):
        video_id = f"synth_{v:04d}"
        data = np.zeros((T, D_in))
        instances = []
        pos = int(rng.integers(0, 4))
        while pos < T:
            length = int(rng.integers(min_len, min(max_len, T) + 1))
            if pos + length > T:
                break
            c = int(rng.integers(0, K))
            data[pos: pos + length] += class_template(c, length, D_in)
            instances.append(ActionInstance(pos * stride, (pos + length) * stride, c))
            pos += length + int(rng.integers(1, 6))
        if noise_level > 0:
            data += rng.normal(0.0, noise_level, size=data.shape)
        data = data.astype(np.float32).astype(np.float64)
        out.append((FeatureSequence(video_id, data, fps=fps, stride=stride),
                    VideoAnnotation(video_id, fps, num_frames, instances)))
    return out
