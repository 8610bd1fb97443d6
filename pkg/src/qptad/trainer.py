"""Set-prediction training: per-layer bipartite matching, composite loss, AdamW, step-halving schedule."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .decoder import ActionDecoder, RawPrediction
from .errors import ConfigError
from .numerics import (Parameter, Tensor, abs_, bce_with_logits, max_, maximum, min_, minimum, relu, stack,
                       sum_)
from .numerics.tensor import _sigmoid_np
from .pipeline.types import ActionInstance, interval_tiou
from .rng import derive_rng

log = logging.getLogger(__name__)


@dataclass
class MatchCostWeights:
    cls: float = 2.0
    l1: float = 5.0
    iou: float = 2.0

    def validate(self) -> "MatchCostWeights":
        if min(self.cls, self.l1, self.iou) < 0:
            raise ConfigError("cost weights must be non-negative")
        if self.cls == self.l1 == self.iou == 0:
            raise ConfigError("cost weights cannot all be zero")
        return self


@dataclass
class TrainSchedule:
    initial_lr: float = 1e-4
    halving_period: int = 10
    epochs: int = 50
    batch_size: int = 1
    max_steps: int | None = None
    weight_decay: float = 1e-4
    clip_norm: float = 1.0

    def validate(self) -> "TrainSchedule":
        for name in ("initial_lr", "halving_period", "epochs", "batch_size", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"schedule.{name} must be positive, got {getattr(self, name)}")
        if self.batch_size != 1:
            raise ConfigError("schedule.batch_size must be 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"schedule.max_steps must be >= 1, got {self.max_steps}")
        if self.weight_decay < 0:
            raise ConfigError("schedule.weight_decay must be >= 0")
        return self

    def lr(self, epoch: int) -> float:
        return self.initial_lr * 0.5 ** (epoch // self.halving_period)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    total_cost: float


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    l1: float
    iou: float

    @property
    def value(self) -> float:
        return float(self.total.data)


@dataclass
class WindowSample:
    """One training window: features ``(T', D_in)`` and window-local ground truth in grid units."""

    features: np.ndarray
    starts: np.ndarray
    ends: np.ndarray
    classes: np.ndarray

    @classmethod
    def from_instances(cls, features: np.ndarray, instances: Sequence[ActionInstance], stride: int = 4):
        return cls(np.asarray(features, dtype=np.float64),
                   np.array([i.start_frame / stride for i in instances], dtype=np.float64),
                   np.array([i.end_frame / stride for i in instances], dtype=np.float64),
                   np.array([i.class_id for i in instances], dtype=np.int64))

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def num_gt(self) -> int:
        return len(self.classes)


class NonFiniteLossError(FloatingPointError):
    pass


# -- matching -------------------------------------------------------------

def pair_cost(score: float, start: float, end: float, gt_start: float, gt_end: float, window_len: float,
              w: MatchCostWeights) -> float:
    """Cost of assigning one query to one ground-truth instance.

    ``score`` is the query's sigmoid score for the ground-truth class; boundaries
    share a unit and are normalised by ``window_len``.
    """
    l1 = (abs(start - gt_start) + abs(end - gt_end)) / window_len
    return w.cls * (1.0 - score) + w.l1 * l1 + w.iou * (1.0 - interval_tiou(start, end, gt_start, gt_end))


def cost_matrix(pred: RawPrediction, sample: WindowSample, w: MatchCostWeights) -> np.ndarray:
    pts = pred.points.data
    starts, ends = pts.min(axis=-1), pts.max(axis=-1)
    scores = _sigmoid_np(pred.class_logits.data)
    C = np.empty((pts.shape[0], sample.num_gt))
    for q in range(pts.shape[0]):
        for g in range(sample.num_gt):
            C[q, g] = pair_cost(scores[q, sample.classes[g]], starts[q], ends[q], sample.starts[g],
                                sample.ends[g], sample.T, w)
    return C


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Minimum-cost one-to-one assignment covering ``min(rows, cols)`` pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got {cost.shape}")
    if cost.size == 0:
        return MatchResult([], 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return MatchResult(pairs, float(sum(cost[r, c] for r, c in pairs)))


# -- loss -----------------------------------------------------------------

def layer_loss(pred: RawPrediction, sample: WindowSample, match: MatchResult,
               w: MatchCostWeights) -> tuple[Tensor, Tensor, Tensor | None, Tensor | None]:
    """Classification, L1 and (1 - tIoU) terms for one layer.

    BCE is summed over all queries and classes and divided by the number of
    ground-truth instances (at least 1); matched queries target their
    ground-truth class, all others target zeros.  Box terms are averaged over
    matched pairs.
    """
    logits = pred.class_logits
    N_q, K = logits.shape
    target = np.zeros((N_q, K))
    for q, g in match.pairs:
        target[q, sample.classes[g]] = 1.0
    cls = sum_(bce_with_logits(logits, target)) * (1.0 / max(sample.num_gt, 1))
    if not match.pairs:
        return cls, cls, None, None
    q_idx = np.array([q for q, _ in match.pairs])
    g_idx = np.array([g for _, g in match.pairs])
    pts = pred.points[q_idx]
    start, end = min_(pts, axis=-1), max_(pts, axis=-1)
    gs, ge = sample.starts[g_idx], sample.ends[g_idx]
    n = float(len(q_idx))
    l1 = sum_(abs_(start - gs) + abs_(end - ge)) * (1.0 / (sample.T * n))
    inter = relu(minimum(end, ge) - maximum(start, gs))
    union = (end - start) + (ge - gs) - inter
    iou = sum_(1.0 - inter / union) * (1.0 / n)
    total = cls + l1 * w.l1 + iou * w.iou
    return total, cls, l1, iou


def match_layers(preds: Sequence[RawPrediction], sample: WindowSample, w: MatchCostWeights) -> list[MatchResult]:
    if sample.num_gt == 0:
        return [MatchResult([], 0.0) for _ in preds]
    return [hungarian_match(cost_matrix(p, sample, w)) for p in preds]


def compute_loss(preds: Sequence[RawPrediction], sample: WindowSample, matches: Sequence[MatchResult],
                 w: MatchCostWeights) -> LossBreakdown:
    """Deep-supervised total over layers, with per-component sums."""
    totals, cls_sum, l1_sum, iou_sum = [], 0.0, 0.0, 0.0
    for pred, match in zip(preds, matches):
        total, cls, l1, iou = layer_loss(pred, sample, match, w)
        totals.append(total)
        cls_sum += float(cls.data)
        l1_sum += 0.0 if l1 is None else float(l1.data)
        iou_sum += 0.0 if iou is None else float(iou.data)
    return LossBreakdown(sum_(stack(totals)), cls_sum, l1_sum, iou_sum)


# -- optimisation ---------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Parameter], weight_decay: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * p.data)

    def state_arrays(self, names: Sequence[str]) -> dict[str, np.ndarray]:
        """Moment buffers keyed ``adam.m/<name>`` and ``adam.v/<name>``, plus the step count."""
        out = {"adam.t": np.array([float(self.t)])}
        for name, m, v in zip(names, self.m, self.v):
            out[f"adam.m/{name}"] = m
            out[f"adam.v/{name}"] = v
        return out

    def load_state_arrays(self, names: Sequence[str], arrays: dict[str, np.ndarray]) -> None:
        if "adam.t" not in arrays:
            raise ValueError("checkpoint has no optimizer state")
        self.t = int(arrays["adam.t"][0])
        for name, m, v in zip(names, self.m, self.v):
            m[...] = arrays[f"adam.m/{name}"]
            v[...] = arrays[f"adam.v/{name}"]


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    params = list(params)
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= scale
    return norm


def train_step(model: ActionDecoder, opt: AdamW, sample: WindowSample, lr: float,
               weights: MatchCostWeights, clip_norm: float = 1.0) -> LossBreakdown:
    """Forward, match every layer, loss, backward, clip, update.

    A non-finite value anywhere in the forward pass or loss raises
    :class:`NonFiniteLossError` before any parameter is touched.
    """
    try:
        preds = model(sample.features)
        matches = match_layers(preds, sample, weights)
        loss = compute_loss(preds, sample, matches, weights)
    except NonFiniteLossError:
        raise
    except FloatingPointError as exc:
        raise NonFiniteLossError(f"non-finite loss: {exc}") from exc
    for name in ("cls", "l1", "iou"):
        if not math.isfinite(getattr(loss, name)):
            raise NonFiniteLossError(f"non-finite loss component '{name}'")
    model.zero_grad()
    loss.total.backward()
    clip_grad_norm(model.parameters(), clip_norm)
    opt.step(lr)
    return loss


LOG_FIELDS = ["step", "epoch", "lr", "total", "cls", "l1", "iou"]


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffled sample order for one epoch; a pure function of ``(seed, epoch)`` so runs resume exactly."""
    return derive_rng(seed, f"shuffle/{epoch}").permutation(n)


def train(model: ActionDecoder, samples: Sequence[WindowSample], schedule: TrainSchedule,
          weights: MatchCostWeights, seed: int = 0, log_path=None,
          state: TrainState | None = None, opt: AdamW | None = None) -> TrainState:
    """Epochs of shuffled single-window steps; stops at ``schedule.epochs`` or ``max_steps``.

    The epoch is ``step // len(samples)``, so a run resumed from ``state``
    picks up mid-epoch at the same position of the same permutation.
    """
    schedule.validate()
    if not samples:
        raise ConfigError("no training windows")
    n = len(samples)
    state = state or TrainState()
    opt = opt or AdamW(model.parameters(), schedule.weight_decay)
    writer = None
    fh = None
    if log_path is not None:
        new = not Path(log_path).exists() or state.step == 0
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            writer.writeheader()
    try:
        order, order_epoch = None, -1
        while schedule.max_steps is None or state.step < schedule.max_steps:
            epoch = state.step // n
            if epoch >= schedule.epochs:
                break
            if epoch != order_epoch:
                order, order_epoch = epoch_order(seed, epoch, n), epoch
                if epoch:
                    log.info("epoch %d starts at step %d", epoch, state.step)
            lr = schedule.lr(epoch)
            loss = train_step(model, opt, samples[order[state.step % n]], lr, weights, schedule.clip_norm)
            row = {"step": state.step, "epoch": epoch, "lr": repr(lr), "total": f"{loss.value:.8g}",
                   "cls": f"{loss.cls:.8g}", "l1": f"{loss.l1:.8g}", "iou": f"{loss.iou:.8g}"}
            state.history.append(row)
            if writer:
                writer.writerow(row)
            state.step += 1
            state.epoch = state.step // n
    finally:
        if fh:
            fh.close()
    return state


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(model: ActionDecoder, path, sidecar: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Named-parameter list: ``u32 count`` then per parameter
    ``u32 name_len | name | u32 ndim | u32 dims... | f64 payload`` (little-endian),
    plus ``<path>.json`` holding ``sidecar``.  ``extra`` arrays (optimizer
    state) are appended as further named entries.
    """
    named = [(n, p.data) for n, p in model.named_parameters()]
    named += sorted((extra or {}).items())
    chunks = [struct.pack("<I", len(named))]
    for name, arr in named:
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(json.dumps(sidecar or {}, indent=1, sort_keys=True) + "\n")


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    (count,), off = struct.unpack_from("<I", buf), 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off: off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out


def load_checkpoint(model: ActionDecoder, path) -> dict:
    """Copy stored values into ``model``; rejects missing names and shape mismatches by name."""
    stored = read_checkpoint(path)
    for name, p in model.named_parameters():
        if name not in stored:
            raise ValueError(f"checkpoint missing parameter '{name}'")
        if stored[name].shape != p.data.shape:
            raise ValueError(f"shape mismatch for '{name}': checkpoint {stored[name].shape} vs model {p.data.shape}")
        p.data[...] = stored[name]
    side = Path(str(path) + ".json")
    return json.loads(side.read_text()) if side.exists() else {}
