"""Action decoder: learnable query points refined through stacked decoder layers.

Each layer runs, in order: Mamba-MHSA over the query vectors, deformable
point-level sampling of the features, instance-level frame/channel mixing,
point-offset prediction, span-scaled point refinement, and a residual FFN
on the point coordinates.  Every layer emits class logits and points for
deep supervision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .numerics import (LayerNorm, Linear, Module, Parameter, Tensor, as_tensor, clip, concat, interp_sample,
                       matmul, max_, maximum, min_, relu, softmax, sum_, swap_last)
from .numerics.tensor import _sigmoid_np
from .pipeline.types import ActionInstance, WindowSpec
from .seqblocks import MambaMHSA, MambaMhsaConfig

NUM_SUBPOINTS = 4
CLS_PRIOR = 0.05


@dataclass
class DecoderConfig:
    L: int = 4
    N_q: int = 48
    N_s: int = 30
    D: int = 256
    D_prime: int = 64
    num_classes: int = 17
    D_in: int = 1024
    spread: float = 0.05
    s_min: float = 1.0
    mamba: MambaMhsaConfig = field(default_factory=MambaMhsaConfig)

    def validate(self) -> "DecoderConfig":
        for name, lo in (("L", 1), ("N_q", 1), ("N_s", 2), ("D", 1), ("D_prime", 1), ("num_classes", 1),
                         ("D_in", 1)):
            if getattr(self, name) < lo:
                raise ConfigError(f"decoder.{name} must be >= {lo}, got {getattr(self, name)}")
        if self.spread < 0:
            raise ConfigError(f"decoder.spread must be >= 0, got {self.spread}")
        if self.s_min <= 0:
            raise ConfigError(f"decoder.s_min must be > 0, got {self.s_min}")
        self.mamba.D = self.D
        self.mamba.validate()
        return self


@dataclass
class QueryState:
    points: Tensor  # (N_q, N_s) in feature-grid units
    vectors: Tensor  # (N_q, D)


@dataclass
class RawPrediction:
    points: Tensor
    class_logits: Tensor
    layer_index: int


def refine_points(points, offsets, s_min: float = 1.0) -> Tensor:
    """Move each query's points by ``offset * s * 0.5``, ``s`` the query's span floored at ``s_min``."""
    points, offsets = as_tensor(points), as_tensor(offsets)
    span = maximum(max_(points, axis=-1) - min_(points, axis=-1), s_min)
    return points + offsets * span.reshape(span.shape + (1,)) * 0.5


class DecoderLayer(Module):
    def __init__(self, rng: np.random.Generator, cfg: DecoderConfig):
        D, N_s, Dp = cfg.D, cfg.N_s, cfg.D_prime
        self.N_s, self.D, self.D_prime = N_s, D, Dp
        self.mamba_mhsa = MambaMHSA(rng, cfg.mamba)
        self.sub_offset = Linear(rng, D, NUM_SUBPOINTS, scale=0.01)
        self.sub_offset.b.data[:] = np.linspace(-1.5, 1.5, NUM_SUBPOINTS)
        self.sub_weight = Linear(rng, D, NUM_SUBPOINTS, scale=0.01)
        self.gen_frame = Linear(rng, D, N_s * N_s)
        self.gen_ch1 = Linear(rng, D, D * Dp)
        self.gen_ch2 = Linear(rng, D, Dp * D)
        self.norm_frame = LayerNorm(N_s)
        self.norm_ch1 = LayerNorm(Dp)
        self.norm_ch2 = LayerNorm(D)
        self.mix_out = Linear(rng, N_s * 2 * D, D, scale=0.1 / np.sqrt(N_s * 2 * D))
        self.point_offset = Linear(rng, D, N_s, scale=0.01)
        self.point_ffn1 = Linear(rng, N_s, N_s, scale=0.1 / np.sqrt(N_s))
        self.point_ffn2 = Linear(rng, N_s, N_s, zero=True)

    def point_level_extract(self, features: Tensor, points: Tensor, Q: Tensor) -> Tensor:
        """``(N_q, N_s, D)``: softmax-weighted sum of features read at 4 offset sub-points per point."""
        offs = self.sub_offset(Q)
        w = softmax(self.sub_weight(Q), axis=-1)
        N_q = Q.shape[0]
        pos = points.reshape(N_q, -1, 1) + offs.reshape(N_q, 1, NUM_SUBPOINTS)
        samples = interp_sample(features, pos)
        return sum_(samples * w.reshape(N_q, 1, NUM_SUBPOINTS, 1), axis=2)

    def instance_mix(self, X: Tensor, Q: Tensor) -> Tensor:
        """Dynamic frame mix and channel mix generated from each query; residual update of ``Q``."""
        N_q = Q.shape[0]
        theta_f = self.gen_frame(Q).reshape(N_q, self.N_s, self.N_s)
        x_f = relu(self.norm_frame(matmul(swap_last(X), theta_f)))
        theta_c1 = self.gen_ch1(Q).reshape(N_q, self.D, self.D_prime)
        theta_c2 = self.gen_ch2(Q).reshape(N_q, self.D_prime, self.D)
        x_c = relu(self.norm_ch1(matmul(X, theta_c1)))
        x_c = relu(self.norm_ch2(matmul(x_c, theta_c2)))
        mixed = concat([swap_last(x_f), x_c], axis=-1).reshape(N_q, -1)
        return Q + self.mix_out(mixed)

    def predict_offsets(self, Q: Tensor) -> Tensor:
        return self.point_offset(Q)

    def ffn_point_update(self, points: Tensor, T: int) -> Tensor:
        """Residual two-layer FFN on each query's coordinate vector.

        Coordinates enter as fractions of the window and the correction is
        scaled back to grid units, so zero weights give the identity.
        """
        z = points * (1.0 / T)
        return points + self.point_ffn2(relu(self.point_ffn1(z))) * float(T)


class ActionDecoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: DecoderConfig):
        self.cfg = cfg.validate()
        self.input_proj = Linear(rng, cfg.D_in, cfg.D)
        self.query_embed = Parameter("query_embed", rng.normal(0.0, 1.0, (cfg.N_q, cfg.D)))
        self.layers = [DecoderLayer(rng, cfg) for _ in range(cfg.L)]
        self.cls_hidden = Linear(rng, cfg.D, cfg.D)
        self.cls_out = Linear(rng, cfg.D, cfg.num_classes, scale=0.01)
        self.cls_out.b.data[:] = -np.log((1 - CLS_PRIOR) / CLS_PRIOR)
        self.rename_parameters()

    def init_queries(self, T: int) -> QueryState:
        """Points at the window midpoint with a symmetric ``spread * T`` fan across the ``N_s`` points."""
        if T < 2:
            raise ValueError(f"feature length must be >= 2, got {T}")
        cfg = self.cfg
        fan = np.linspace(-cfg.spread * T, cfg.spread * T, cfg.N_s)
        points = np.broadcast_to(T / 2.0 + fan, (cfg.N_q, cfg.N_s)).copy()
        return QueryState(Tensor(points), self.query_embed + 0.0)

    def classify(self, Q: Tensor) -> Tensor:
        return self.cls_out(relu(self.cls_hidden(Q)))

    def layer_forward(self, layer: DecoderLayer, features: Tensor, state: QueryState) -> QueryState:
        T = features.shape[0]
        Q = layer.mamba_mhsa(state.vectors)
        X = layer.point_level_extract(features, state.points, Q)
        Q = layer.instance_mix(X, Q)
        P = refine_points(state.points, layer.predict_offsets(Q), self.cfg.s_min)
        P = layer.ffn_point_update(P, T)
        return QueryState(clip(P, -float(T), 2.0 * T), Q)

    def __call__(self, features) -> list[RawPrediction]:
        features = as_tensor(features)
        if features.ndim != 2 or features.shape[1] != self.cfg.D_in:
            raise ValueError(f"expected (T', {self.cfg.D_in}) features, got {features.shape}")
        F = self.input_proj(features)
        state = self.init_queries(F.shape[0])
        preds = []
        for i, layer in enumerate(self.layers):
            state = self.layer_forward(layer, F, state)
            preds.append(RawPrediction(state.points, self.classify(state.vectors), i))
        return preds


def decoder_forward(model: ActionDecoder, features) -> list[RawPrediction]:
    return model(features)


def decode_instances(pred: RawPrediction, window: WindowSpec, score_thresh: float = 0.1,
                     num_frames: int | None = None) -> list[ActionInstance]:
    """Per query: span ``[min, max]`` of its points clamped to the window, class by top sigmoid score.

    Grid units map to frames by the window stride and are offset to global
    frames; spans of zero length or scores under the threshold are dropped.
    """
    pts = np.asarray(pred.points.data if isinstance(pred.points, Tensor) else pred.points)
    logits = np.asarray(pred.class_logits.data if isinstance(pred.class_logits, Tensor) else pred.class_logits)
    scores = _sigmoid_np(logits)
    lo = np.clip(pts.min(axis=-1), 0.0, window.feat_len)
    hi = np.clip(pts.max(axis=-1), 0.0, window.feat_len)
    cls = scores.argmax(axis=-1)
    out = []
    for q in range(pts.shape[0]):
        score = float(scores[q, cls[q]])
        start = float(lo[q] * window.stride + window.start_frame)
        end = float(hi[q] * window.stride + window.start_frame)
        if num_frames is not None:
            start, end = min(start, num_frames), min(end, num_frames)
        if score >= score_thresh and end > start:
            out.append(ActionInstance(start, end, int(cls[q]), score))
    return out
