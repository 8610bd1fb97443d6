"""Run configuration: JSON sections mapped onto each module's config dataclass."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .decoder import DecoderConfig
from .errors import ConfigError
from .evaluator import EvalConfig
from .pipeline.types import DEFAULT_STRIDE
from .seqblocks import MambaMhsaConfig
from .trainer import MatchCostWeights, TrainSchedule


@dataclass
class WindowConfig:
    beta: int = 128
    train_overlap: float = 0.75
    infer_overlap: float = 0.0
    score_thresh: float = 0.1
    nms_tiou: float = 0.5

    def validate(self) -> "WindowConfig":
        if self.beta < DEFAULT_STRIDE or self.beta % DEFAULT_STRIDE:
            raise ConfigError(f"window.beta must be a positive multiple of {DEFAULT_STRIDE}, got {self.beta}")
        for name in ("train_overlap", "infer_overlap"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"window.{name} must be in [0, 1), got {getattr(self, name)}")
        if not 0.0 <= self.score_thresh <= 1.0:
            raise ConfigError(f"window.score_thresh must be in [0, 1], got {self.score_thresh}")
        if not 0.0 < self.nms_tiou <= 1.0:
            raise ConfigError(f"window.nms_tiou must be in (0, 1], got {self.nms_tiou}")
        return self


@dataclass
class SynthConfig:
    num_videos: int = 4
    noise_level: float = 0.1
    num_frames: int = 512
    min_len: int = 2
    max_len: int = 80

    def validate(self) -> "SynthConfig":
        if self.num_videos < 0:
            raise ConfigError(f"synth.num_videos must be >= 0, got {self.num_videos}")
        if self.noise_level < 0:
            raise ConfigError(f"synth.noise_level must be >= 0, got {self.noise_level}")
        if self.num_frames < DEFAULT_STRIDE or self.num_frames % DEFAULT_STRIDE:
            raise ConfigError(f"synth.num_frames must be a positive multiple of {DEFAULT_STRIDE}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"synth needs 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        return self


SECTIONS = {
    "decoder": DecoderConfig,
    "mamba": MambaMhsaConfig,
    "schedule": TrainSchedule,
    "cost": MatchCostWeights,
    "eval": EvalConfig,
    "window": WindowConfig,
    "synth": SynthConfig,
}
# filled from other sections, never read from JSON
_DERIVED = {"decoder": {"mamba"}, "mamba": {"D"}}


@dataclass
class RunConfig:
    seed: int = 0
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    mamba: MambaMhsaConfig = field(default_factory=MambaMhsaConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    cost: MatchCostWeights = field(default_factory=MatchCostWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> "RunConfig":
        self.decoder.mamba = self.mamba
        self.decoder.validate()
        for name in ("schedule", "cost", "eval", "window", "synth"):
            getattr(self, name).validate()
        if self.decoder.num_classes > self.decoder.D_in:
            raise ConfigError(f"decoder.num_classes={self.decoder.num_classes} exceeds decoder.D_in="
                              f"{self.decoder.D_in} (synthetic patterns need one channel per class)")
        return self

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            for key in _DERIVED.get(name, ()):
                sec.pop(key, None)
            out[name] = sec
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        unknown = set(raw) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(seed=int(raw.get("seed", 0)))
        for name, klass in SECTIONS.items():
            sec = raw.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"config section '{name}' must be an object")
            allowed = {f.name for f in dataclasses.fields(klass)} - _DERIVED.get(name, set())
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown keys in '{name}': {sorted(bad)}")
            setattr(cfg, name, klass(**sec))
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def apply_overrides(self, *, beta=None, nq=None, ns=None, layers=None, mamba_blocks=None, seed=None
                        ) -> "RunConfig":
        """The ablation axes: window size, queries, points per query, decoder layers, Mamba blocks."""
        if beta is not None:
            self.window.beta = beta
        if nq is not None:
            self.decoder.N_q = nq
        if ns is not None:
            self.decoder.N_s = ns
        if layers is not None:
            self.decoder.L = layers
        if mamba_blocks is not None:
            self.mamba.M = mamba_blocks
        if seed is not None:
            self.seed = seed
        return self.validate()
