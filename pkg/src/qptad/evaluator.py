"""Detection F1: greedy score-ordered matching at a tIoU threshold, pooled over videos."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ConfigError
from .pipeline.io import read_annotations
from .pipeline.types import ActionInstance, VideoAnnotation, interval_tiou


@dataclass
class EvalConfig:
    tiou_threshold: float = 0.5
    require_class_match: bool = True
    report_scale: float = 100.0

    def validate(self) -> "EvalConfig":
        if not 0.0 < self.tiou_threshold <= 1.0:
            raise ConfigError(f"eval.tiou_threshold must be in (0, 1], got {self.tiou_threshold}")
        if not 0.0 < self.report_scale <= 100.0:
            raise ConfigError(f"eval.report_scale must be in (0, 100], got {self.report_scale}")
        return self


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    per_class: dict[int, dict] = field(default_factory=dict)
    per_video_mean_f1: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in sorted(self.per_class.items())}
        return d


class VideoSetMismatchError(ValueError):
    pass


def tiou(a: ActionInstance, b: ActionInstance) -> float:
    return interval_tiou(a.start_frame, a.end_frame, b.start_frame, b.end_frame)


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def match_detections(preds: Sequence[ActionInstance], gts: Sequence[ActionInstance],
                     cfg: EvalConfig | None = None, per_class: dict | None = None) -> Counts:
    """Greedy matching in descending score order.

    A prediction is a true positive when an unconsumed ground truth of the
    same class (if required) reaches the tIoU threshold; the best-overlapping
    such ground truth is consumed.  Leftover ground truths are misses.
    """
    cfg = cfg or EvalConfig()
    consumed = [False] * len(gts)
    counts = Counts()
    for p in sorted(preds, key=lambda x: -x.score):
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if consumed[j] or (cfg.require_class_match and g.class_id != p.class_id):
                continue
            iou = tiou(p, g)
            if iou >= cfg.tiou_threshold and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            consumed[best] = True
            counts.tp += 1
            if per_class is not None:
                per_class[p.class_id].tp += 1
        else:
            counts.fp += 1
            if per_class is not None:
                per_class[p.class_id].fp += 1
    for j, g in enumerate(gts):
        if not consumed[j]:
            counts.fn += 1
            if per_class is not None:
                per_class[g.class_id].fn += 1
    return counts


def report_from_counts(c: Counts, scale: float = 100.0) -> tuple[float, float, float]:
    p, r = _ratio(c.tp, c.tp + c.fp), _ratio(c.tp, c.tp + c.fn)
    return p * scale, r * scale, f1_score(p, r) * scale


def evaluate_videos(preds: Mapping[str, VideoAnnotation], gts: Mapping[str, VideoAnnotation],
                    cfg: EvalConfig | None = None) -> EvalReport:
    """Pool counts over all videos (micro average), then precision, recall and F1 on the report scale."""
    cfg = (cfg or EvalConfig()).validate()
    if set(preds) != set(gts):
        diff = sorted(set(preds) ^ set(gts))
        raise VideoSetMismatchError(f"prediction and ground-truth video sets differ: {diff}")
    per_class: dict[int, Counts] = defaultdict(Counts)
    total = Counts()
    video_f1 = []
    for vid in sorted(gts):
        c = match_detections(preds[vid].instances, gts[vid].instances, cfg, per_class)
        total = total + c
        video_f1.append(report_from_counts(c, cfg.report_scale)[2])
    p, r, f = report_from_counts(total, cfg.report_scale)
    classes = {}
    for k, c in per_class.items():
        cp, cr, cf = report_from_counts(c, cfg.report_scale)
        classes[k] = {"tp": c.tp, "fp": c.fp, "fn": c.fn, "precision": cp, "recall": cr, "f1": cf}
    mean_f1 = sum(video_f1) / len(video_f1) if video_f1 else 0.0
    return EvalReport(total.tp, total.fp, total.fn, p, r, f, classes, mean_f1)


def evaluate_corpus(pred_path, gt_path, cfg: EvalConfig | None = None) -> EvalReport:
    return evaluate_videos(read_annotations(pred_path), read_annotations(gt_path), cfg)


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1) + "\n")
