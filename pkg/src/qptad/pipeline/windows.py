"""Sliding windows, coordinate maps, window label assignment and prediction merging."""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable

import numpy as np

from .types import DEFAULT_STRIDE, ActionInstance, FeatureSequence, WindowSpec, interval_tiou

LABEL_MIN_INSTANCE_FRAC = 0.5
LABEL_MIN_WINDOW_FRAC = 0.75
NMS_TIOU = 0.5


def make_windows(num_frames: int, beta: int = 128, overlap_ratio: float = 0.0, video_id: str = "",
                 stride: int = DEFAULT_STRIDE) -> list[WindowSpec]:
    """Cover ``[0, num_frames)`` with ``beta``-frame windows.

    Starts advance by ``beta * (1 - overlap_ratio)`` (rounded down to the
    feature stride, at least one stride).  The last window is shifted left to
    end at the video end; a video shorter than ``beta`` gets one window that
    the caller zero-pads.
    """
    if not 0.0 <= overlap_ratio < 1.0:
        raise ValueError(f"overlap_ratio must be in [0, 1), got {overlap_ratio}")
    if beta < stride or beta % stride:
        raise ValueError(f"beta={beta} must be a positive multiple of stride={stride}")
    if num_frames <= beta:
        return [WindowSpec(video_id, 0, beta, stride)]
    step = int(round(beta * (1.0 - overlap_ratio)))
    step = max(stride, step - step % stride)
    starts = list(range(0, num_frames - beta + 1, step))
    last = (num_frames - beta) - (num_frames - beta) % stride
    if starts[-1] + beta < num_frames and last not in starts:
        starts.append(last)
    return [WindowSpec(video_id, s, beta, stride) for s in starts]


def frames_to_grid(frame, stride: int = DEFAULT_STRIDE):
    return frame / stride


def grid_to_frames(grid, stride: int = DEFAULT_STRIDE):
    return grid * stride


def to_local(frame, w: WindowSpec):
    return frame - w.start_frame


def to_global(frame, w: WindowSpec):
    return frame + w.start_frame


def window_features(seq: FeatureSequence, w: WindowSpec) -> np.ndarray:
    """The ``(beta/stride, D_in)`` slice under ``w``, zero-padded past the video end."""
    out = np.zeros((w.feat_len, seq.D_in))
    chunk = seq.data[w.feat_start: w.feat_start + w.feat_len]
    out[: len(chunk)] = chunk
    return out


def assign_labels(instances: Iterable[ActionInstance], w: WindowSpec) -> list[ActionInstance]:
    """Window-local ground truth.

    An instance is kept when the window covers at least half of it, or when
    it covers at least three quarters of the window; kept instances are
    clipped to the window and re-based to window-local frames.
    """
    kept = []
    for inst in instances:
        lo, hi = max(inst.start_frame, w.start_frame), min(inst.end_frame, w.end_frame)
        overlap = hi - lo
        if overlap <= 0:
            continue
        if overlap >= LABEL_MIN_INSTANCE_FRAC * inst.length or overlap >= LABEL_MIN_WINDOW_FRAC * w.length:
            kept.append(ActionInstance(to_local(lo, w), to_local(hi, w), inst.class_id, inst.score))
    return kept


def temporal_nms(instances: list[ActionInstance], tiou_threshold: float = NMS_TIOU) -> list[ActionInstance]:
    """Greedy per-class suppression: a kept instance removes same-class ones with tIoU above the threshold."""
    by_class: dict[int, list[ActionInstance]] = defaultdict(list)
    for inst in instances:
        by_class[inst.class_id].append(inst)
    kept = []
    for cls_instances in by_class.values():
        pending = sorted(cls_instances, key=lambda x: -x.score)
        while pending:
            best = pending.pop(0)
            kept.append(best)
            pending = [x for x in pending
                       if interval_tiou(best.start_frame, best.end_frame, x.start_frame, x.end_frame)
                       <= tiou_threshold]
    return kept


def merge_predictions(per_window: Iterable[list[ActionInstance]],
                      tiou_threshold: float = NMS_TIOU) -> list[ActionInstance]:
    """Concatenate global-frame window predictions, run per-class NMS, sort by score descending."""
    flat = [inst for lst in per_window for inst in lst]
    return sorted(temporal_nms(flat, tiou_threshold), key=lambda x: (-x.score, x.start_frame, x.class_id))
