"""Run configuration: defaults, JSON round-trip, hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .estimators import ESTIMATORS
from .policies import POLICIES

# json key for the sparsity weight; "lambda" is reserved in python
_LAMBDA_KEY = "lambda"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    rmsprop_smoothing: float = 0.99
    rmsprop_epsilon: float = 1e-8
    batch_size: int = 16
    epochs: int = 100
    tau: float = 0.05
    lam: float = 0.01
    estimator: str = "gs"
    policy: str = "vfds"
    seed: int = 0
    hidden_sizes: list[int] = field(default_factory=lambda: [32])
    gate_hidden: int = 0  # 0: one hidden unit per gate
    alpha: float = 0.5
    random_p: float = 0.25
    costs: list[float] | None = None
    groups: list[list[int]] | None = None
    clip_norm: float = 5.0
    normalize: str = "zscore"
    segment_len: int = 0  # 0: no segmentation
    pad: str = "repeat"
    split_ratios: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_by: str = "subject"

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.rmsprop_smoothing < 1.0:
            raise ValueError("rmsprop_smoothing must lie in (0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden_sizes must be positive")
        if len(self.hidden_sizes) > 2:
            raise ValueError("at most two recurrent layers are supported")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if not 0.0 <= self.random_p <= 1.0:
            raise ValueError("random_p must lie in [0, 1]")
        if self.normalize not in ("zscore", "minmax", "none"):
            raise ValueError("normalize must be zscore, minmax, or none")
        if self.pad not in ("repeat", "zero"):
            raise ValueError("pad must be repeat or zero")
        if self.split_by not in ("subject", "random"):
            raise ValueError("split_by must be subject or random")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split_ratios must be three values summing to 1")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d[_LAMBDA_KEY] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if _LAMBDA_KEY in d:
            d["lam"] = d.pop(_LAMBDA_KEY)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw).validate()
