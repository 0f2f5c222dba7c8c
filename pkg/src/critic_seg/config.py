"""Experiment configuration: one JSON file drives every pipeline stage.

Stage-scoped config hashes chain together so downstream artifacts record
exactly which upstream configuration produced their inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .crf import CrfSpec
from .datasets import DatasetSpec, SplitSpec
from .errors import ConfigError
from .evaluation import SaliencySpec
from .model import ModelSpec
from .synthgym import EpisodeConfig, SceneConfig
from .training import Phase1Hyper, Phase2Hyper


@dataclass
class DataCounts:
    train_episodes: int = 75
    val_episodes: int = 6
    test_episodes: int = 10
    test_frames_cap: int = 1000


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    counts: DataCounts = field(default_factory=DataCounts)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    # desk-scale training schedule, tuned once on the synthetic validation
    # episodes and then frozen
    phase1: Phase1Hyper = field(default_factory=lambda: Phase1Hyper(epochs=5, lr=2e-3))
    phase2: Phase2Hyper = field(default_factory=Phase2Hyper)
    saliency: SaliencySpec = field(default_factory=SaliencySpec)
    crf: CrfSpec = field(default_factory=CrfSpec)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    data_seed: int = 20260826
    mask_threshold: float = 0.5
    crf_eval_frames: int = 200  # CRF refinement evaluated on this many test frames
    out_dir: str = "runs/default"

    def validate(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not (0.0 < self.mask_threshold < 1.0):
            raise ConfigError("mask_threshold must be in (0, 1)")
        try:
            self.scene.validate()
            self.episode.validate()
            self.dataset.validate()
            self.split.validate()
            self.phase1.validate()
            self.phase2.validate()
            self.saliency.validate()
            self.crf.validate()
        except AssertionError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kwargs = {}
        sub = {
            "scene": SceneConfig, "episode": EpisodeConfig, "counts": DataCounts,
            "dataset": DatasetSpec, "split": SplitSpec, "model": ModelSpec,
            "phase1": Phase1Hyper, "phase2": Phase2Hyper, "saliency": SaliencySpec,
            "crf": CrfSpec,
        }
        known = {f.name for f in fields(cls)}
        for key, value in d.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key in sub:
                try:
                    value = sub[key](**{k: _detuple(v) for k, v in value.items()})
                except TypeError as exc:
                    raise ConfigError(f"bad {key} section: {exc}") from exc
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        cfg = cls.from_dict(data)
        cfg.validate()
        return cfg

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def _detuple(v):
    return tuple(v) if isinstance(v, list) and len(v) == 2 and all(
        isinstance(x, (int, float)) for x in v
    ) else v


def _hash_obj(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    ).hexdigest()


def stage_hash(cfg: ExperimentConfig, stage: str, upstream: str = "", **extra) -> str:
    """Config hash for one stage, chained with its upstream stage hash."""
    scopes = {
        "generate": ["scene", "episode", "counts", "data_seed"],
        "prepare": ["dataset"],
        "train_critic": ["model", "phase1"],
        "split": ["split"],
        "train_seg": ["phase2"],
        "evaluate": ["mask_threshold", "saliency", "crf", "crf_eval_frames"],
        "table1": ["seeds"],
    }
    if stage not in scopes:
        raise ValueError(f"unknown stage {stage!r}")
    d = cfg.to_dict()
    payload = {k: d[k] for k in scopes[stage]}
    payload["_stage"] = stage
    payload["_upstream"] = upstream
    payload.update(extra)
    return _hash_obj(payload)


def derive_seed(*parts) -> int:
    """Stable per-stage integer seed from hierarchical parts."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)
