"""Feature ingestion, synthetic data, sliding windows and prediction merging."""

from .io import (BadMagicError, EmptySequenceError, FeatureFormatError, NonFiniteFeatureError,
                 TruncatedPayloadError, UnsupportedVersionError, decode_features, encode_features,
                 ingest_features, read_annotations, write_annotations, write_features, write_predictions)
from .synth import class_template, synth_generate
from .types import (DEFAULT_FPS, DEFAULT_STRIDE, ActionInstance, FeatureSequence, VideoAnnotation, WindowSpec,
                    interval_tiou)
from .windows import (assign_labels, frames_to_grid, grid_to_frames, make_windows, merge_predictions,
                      temporal_nms, to_global, to_local, window_features)
