"""Glue between the pipeline and the decoder: window samples for training, video-level inference."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, Sequence

from .decoder import ActionDecoder, decode_instances
from .numerics import no_grad
from .pipeline import (ActionInstance, FeatureSequence, VideoAnnotation, assign_labels, make_windows,
                       merge_predictions, window_features)
from .pipeline.windows import NMS_TIOU
from .trainer import WindowSample

THREADS_ENV = "QPTAD_THREADS"


def build_samples(pairs: Iterable[tuple[FeatureSequence, VideoAnnotation]], beta: int,
                  overlap: float) -> list[WindowSample]:
    samples = []
    for seq, ann in pairs:
        for w in make_windows(seq.num_frames, beta, overlap, seq.video_id, seq.stride):
            gt = assign_labels(ann.instances, w)
            samples.append(WindowSample.from_instances(window_features(seq, w), gt, seq.stride))
    return samples


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def infer_video(model: ActionDecoder, seq: FeatureSequence, beta: int = 128, overlap: float = 0.0,
                score_thresh: float = 0.1, nms_tiou: float = NMS_TIOU,
                threads: int | None = None) -> list[ActionInstance]:
    """Windows -> last decoder layer -> instances -> per-class NMS, in global frames."""
    windows = make_windows(seq.num_frames, beta, overlap, seq.video_id, seq.stride)

    def run(w):
        with no_grad():
            pred = model(window_features(seq, w))[-1]
        return decode_instances(pred, w, score_thresh, num_frames=seq.num_frames)

    threads = threads or thread_cap()
    if threads > 1 and len(windows) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_window = list(pool.map(run, windows))
    else:
        per_window = [run(w) for w in windows]
    return merge_predictions(per_window, nms_tiou)


def infer_corpus(model: ActionDecoder, seqs: Sequence[FeatureSequence], **kw) -> list[VideoAnnotation]:
    return [VideoAnnotation(s.video_id, s.fps, s.num_frames, infer_video(model, s, **kw)) for s in seqs]
