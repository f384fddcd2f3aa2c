"""Declarative run configuration.

One flat key set, loaded from a JSON document; unknown keys are rejected so
typos fail fast.  Defaults follow the reference operating point: 8 samples at
temperature 1.0 / top-k 40, equal module weights of 0.5, contrast strength
0.5 with plausibility cutoff 0.1, and up to 3 expert retries.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .experts import MODULES

SCHEMA_VERSION = 1


@dataclass
class RunConfig:
    # sampling
    n_samples: int = 8
    temperature: float = 1.0
    top_k: int = 40
    max_tokens: int = 512
    logprob_depth: int = 1
    seed: int = 0
    max_inflight: int = 8
    # confidence aggregation ("mean", "tail:<m>", "min_cert", "bottom_group:<eta>")
    aggregation: str = "mean"
    # module voting weights
    tau_expert: float = 0.5
    tau_reflection: float = 0.5
    tau_check: float = 0.5
    # contrastive self-check
    contrast_alpha: float = 0.5
    contrast_beta: float = 0.1
    noise_sigma: float = 64.0
    # reward shaping
    reward_alpha: float = 0.5
    reward_beta: float = 5.0
    # expert behavior
    expert_retries: int = 3
    certainty_gate: float | None = None
    planner_order: list[str] | None = None
    modules: list[str] = field(default_factory=lambda: list(MODULES))
    reflection_samples: int = 1
    # reporting
    ece_bins: int = 10
    include_timings: bool = False
    filter_fraction: float = 0.5
    scaling_n: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 16, 32])
    # backends
    backend: str | None = None
    expert_backend: str | None = None
    model: str = "base-model"
    expert_model: str = "expert-model"
    http_timeout: float = 60.0
    http_retries: int = 2
    http_backoff: float = 0.5
    http_jitter: float = 0.1

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        for name in ("tau_expert", "tau_reflection", "tau_check", "contrast_alpha"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.contrast_beta <= 1.0:
            raise ConfigError(
                f"contrast_beta must be in [0, 1], got {self.contrast_beta}"
            )
        if self.temperature < 0.0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if not 0.0 < self.filter_fraction <= 1.0:
            raise ConfigError(
                f"filter_fraction must be in (0, 1], got {self.filter_fraction}"
            )
        unknown = set(self.modules) - set(MODULES)
        if unknown:
            raise ConfigError(f"unknown modules {sorted(unknown)}; valid: {MODULES}")
        if self.planner_order is not None and sorted(self.planner_order) != sorted(
            self.modules
        ):
            raise ConfigError(
                f"planner_order {self.planner_order} must permute modules {self.modules}"
            )

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**payload)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            payload = json.loads(Path(path).read_text("utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        if not isinstance(payload, dict):
            raise ConfigError("config document must be a JSON object")
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)
