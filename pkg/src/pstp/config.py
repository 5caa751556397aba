"""Configuration records for the model, training loop and synthetic data."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

from pstp.errors import ConfigError


def _check(problems: list[str]) -> None:
    if problems:
        raise ConfigError("; ".join(problems))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the full-size setting: 20 segments of 3 one-second snippets,
    50 patches per frame (49 spatial cells plus the [CLS] token), 512-wide
    features, 7 kept segments and 20 kept patches per frame.
    """

    K: int = 20
    T: int = 3
    M: int = 50
    D: int = 512
    D_a: int = 128
    top_k: int = 7
    top_m: int = 20
    heads: int = 4
    fusion_layers: int = 1
    C: int = 42
    use_srsm: bool = True
    use_avam: bool = True
    use_lgpm: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        for name in ("K", "T", "M", "D", "D_a", "top_k", "top_m", "heads", "fusion_layers", "C"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                problems.append(f"{name} must be an integer, got {value!r}")
            elif value < 1:
                problems.append(f"{name} must be positive, got {value}")
        if problems:
            _check(problems)
        if self.top_k > self.K:
            problems.append(f"top_k={self.top_k} exceeds K={self.K}")
        if self.top_m > self.M:
            problems.append(f"top_m={self.top_m} exceeds M={self.M}")
        if self.D % self.heads:
            problems.append(f"D={self.D} is not divisible by heads={self.heads}")
        if not self.use_srsm and self.top_m != self.M:
            problems.append("use_srsm=False requires top_m == M")
        _check(problems)

    @property
    def gamma(self) -> int:
        """Number of selected frames, ``T * top_k``."""
        return self.T * self.top_k

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        return cls(**_pick(cls, data, "model"))

    def ablate(self, name: str) -> "ModelConfig":
        """Return the configuration with one module removed.

        Without TSSM every segment is kept; without SRSM every patch is kept
        and the patch attention is skipped; AVAM and LGPM are simply dropped.
        """
        if name == "tssm":
            return self.replace(top_k=self.K)
        if name == "srsm":
            return self.replace(top_m=self.M, use_srsm=False)
        if name == "avam":
            return self.replace(use_avam=False)
        if name == "lgpm":
            return self.replace(use_lgpm=False)
        raise ConfigError(f"unknown ablation {name!r}; expected one of tssm, srsm, avam, lgpm")


ABLATIONS = ("tssm", "srsm", "avam", "lgpm")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.1
    decay_every: int = 10
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        problems = []
        if not self.lr >= 0:
            problems.append(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.decay_every < 1:
            problems.append(f"decay_every must be >= 1, got {self.decay_every}")
        if self.precision not in ("float32", "float64"):
            problems.append(f"precision must be float32 or float64, got {self.precision!r}")
        _check(problems)

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def lr_at(self, epoch: int) -> float:
        """Step schedule: ``lr * lr_decay ** (epoch // decay_every)``."""
        return self.lr * self.lr_decay ** (epoch // self.decay_every)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        return cls(**_pick(cls, data, "train"))


QTYPES = ("Audio/Counting", "Visual/Location", "Audio-Visual/Existential", "Audio-Visual/Temporal")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic dataset with one planted segment and patch per video.

    ``planted`` optionally fixes ``(segment, patch, answer)`` per video; when
    empty the plants are drawn from ``seed``.
    """

    n_videos: int = 100
    signal_strength: float = 5.0
    noise_std: float = 1.0
    question_noise: float = 0.05
    seed: int = 0
    planted: tuple = field(default_factory=tuple)
    qtypes: tuple = QTYPES
    split: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        problems = []
        if self.n_videos < 1:
            problems.append(f"n_videos must be >= 1, got {self.n_videos}")
        if self.signal_strength < 0:
            problems.append(f"signal_strength must be >= 0, got {self.signal_strength}")
        if self.noise_std < 0:
            problems.append(f"noise_std must be >= 0, got {self.noise_std}")
        if self.question_noise < 0:
            problems.append(f"question_noise must be >= 0, got {self.question_noise}")
        if self.planted and len(self.planted) != self.n_videos:
            problems.append(f"planted lists {len(self.planted)} videos, n_videos={self.n_videos}")
        if not self.qtypes:
            problems.append("qtypes must not be empty")
        _check(problems)

    def validate_for(self, cfg: ModelConfig) -> None:
        problems = []
        for i, (seg, patch, answer) in enumerate(self.planted):
            if not 0 <= seg < cfg.K:
                problems.append(f"planted[{i}] segment {seg} outside [0, {cfg.K})")
            if not 0 <= patch < cfg.M:
                problems.append(f"planted[{i}] patch {patch} outside [0, {cfg.M})")
            if not 0 <= answer < cfg.C:
                problems.append(f"planted[{i}] answer {answer} outside [0, {cfg.C})")
        _check(problems)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["planted"] = [list(p) for p in self.planted]
        d["qtypes"] = list(self.qtypes)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SynthSpec":
        kw = _pick(cls, data, "synth")
        if "planted" in kw:
            kw["planted"] = tuple(tuple(int(v) for v in p) for p in kw["planted"])
        for key in ("qtypes", "split"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def _pick(cls, data: dict[str, Any], section: str) -> dict[str, Any]:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"[{section}] must be a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown field(s): {', '.join(unknown)}")
    return dict(data)
