from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_STRIDE = 4
DEFAULT_FPS = 10


@dataclass(frozen=True)
class ActionInstance:
    """A gesture occurrence on the half-open frame interval ``[start_frame, end_frame)``.

    Ground truth carries ``score=1.0``.
    """

    start_frame: float
    end_frame: float
    class_id: int
    score: float = 1.0

    @property
    def length(self) -> float:
        return self.end_frame - self.start_frame

    def to_dict(self, with_score: bool = True) -> dict:
        d = {"start_frame": _num(self.start_frame), "end_frame": _num(self.end_frame),
             "class_id": int(self.class_id)}
        if with_score:
            d["score"] = float(self.score)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ActionInstance":
        return cls(d["start_frame"], d["end_frame"], int(d["class_id"]), float(d.get("score", 1.0)))


def _num(x: float):
    return int(x) if float(x).is_integer() else float(x)


def interval_tiou(a0: float, a1: float, b0: float, b1: float) -> float:
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class FeatureSequence:
    """Per-timestep features on the stride grid; ``data`` is ``(T', D_in)``."""

    video_id: str
    data: np.ndarray
    fps: int = DEFAULT_FPS
    stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError(f"{self.video_id}: feature data must be (T', D_in) with T' >= 1, got {self.data.shape}")
        if self.stride < 1:
            raise ValueError(f"{self.video_id}: stride must be >= 1")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"{self.video_id}: non-finite feature values")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def D_in(self) -> int:
        return self.data.shape[1]

    @property
    def num_frames(self) -> int:
        return self.T * self.stride


@dataclass
class VideoAnnotation:
    video_id: str
    fps: int
    num_frames: int
    instances: list[ActionInstance] = field(default_factory=list)


@dataclass(frozen=True)
class WindowSpec:
    """A ``length``-frame slice of a video starting at ``start_frame``."""

    video_id: str
    start_frame: int
    length: int = 128
    stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        if self.length % self.stride:
            raise ValueError(f"window length {self.length} not divisible by stride {self.stride}")

    @property
    def end_frame(self) -> int:
        return self.start_frame + self.length

    @property
    def feat_start(self) -> int:
        return self.start_frame // self.stride

    @property
    def feat_len(self) -> int:
        return self.length // self.stride
