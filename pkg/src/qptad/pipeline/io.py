"""Binary feature files and JSON annotation/prediction files.

Feature file layout (little-endian)::

    b"MGFT" | u16 version=1 | u32 T' | u32 D_in | u16 fps | u16 stride | f32[T' * D_in]

Payload is row-major by timestep.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .types import ActionInstance, FeatureSequence, VideoAnnotation

MAGIC = b"MGFT"
VERSION = 1
_HEADER = struct.Struct("<4sHIIHH")


class FeatureFormatError(ValueError):
    pass


class BadMagicError(FeatureFormatError):
    pass


class UnsupportedVersionError(FeatureFormatError):
    pass


class TruncatedPayloadError(FeatureFormatError):
    pass


class NonFiniteFeatureError(FeatureFormatError):
    pass


class EmptySequenceError(FeatureFormatError):
    pass


def encode_features(seq: FeatureSequence) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, seq.T, seq.D_in, seq.fps, seq.stride)
    return header + np.ascontiguousarray(seq.data, dtype="<f4").tobytes()


def decode_features(buf: bytes, video_id: str = "") -> FeatureSequence:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{video_id}: bad magic {bytes(buf[:4])!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(f"{video_id}: header truncated ({len(buf)} bytes)")
    _, version, T, D, fps, stride = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersionError(f"{video_id}: unsupported version {version}")
    if T == 0:
        raise EmptySequenceError(f"{video_id}: T' = 0")
    expected = T * D * 4
    payload = buf[_HEADER.size:]
    if len(payload) != expected:
        raise TruncatedPayloadError(f"{video_id}: payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(T, D)
    if not np.all(np.isfinite(data)):
        raise NonFiniteFeatureError(f"{video_id}: non-finite feature values")
    return FeatureSequence(video_id, data.astype(np.float64), fps=fps, stride=stride)


def write_features(seq: FeatureSequence, path) -> None:
    Path(path).write_bytes(encode_features(seq))


def ingest_features(path, video_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    return decode_features(path.read_bytes(), video_id or path.stem)


def _video_to_dict(v: VideoAnnotation, with_score: bool) -> dict:
    return {"video_id": v.video_id, "fps": v.fps, "num_frames": v.num_frames,
            "instances": [i.to_dict(with_score) for i in v.instances]}


def write_annotations(videos: Iterable[VideoAnnotation], path, with_score: bool = False) -> None:
    payload = [_video_to_dict(v, with_score) for v in videos]
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def write_predictions(videos: Iterable[VideoAnnotation], path) -> None:
    write_annotations(videos, path, with_score=True)


def read_annotations(path) -> dict[str, VideoAnnotation]:
    raw = json.loads(Path(path).read_text())
    out: dict[str, VideoAnnotation] = {}
    for v in raw:
        out[v["video_id"]] = VideoAnnotation(
            v["video_id"], int(v.get("fps", 10)), int(v["num_frames"]),
            [ActionInstance.from_dict(i) for i in v.get("instances", [])])
    return out
