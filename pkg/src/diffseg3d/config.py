"""Run configuration (YAML) with strict validation and seed sub-streams."""
from __future__ import annotations

from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .synth import LEVEL_K, SceneConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Range = tuple[float, float]


class DatasetSection(_Strict):
    count: int = Field(24, ge=1)
    extent: int = Field(32, ge=4)
    variant: Literal["regular", "irregular"] = "regular"
    n_vesicles: int = Field(2, ge=0)
    n_mitochondria: int = Field(2, ge=0)
    n_aggregates_per_class: int = Field(1, ge=0)
    cell_radius: Range = (10.0, 13.0)
    vesicle_radius: Range = (2.5, 3.5)
    mitochondrion_radius: Range = (2.5, 3.5)
    aggregate_radius: Range = (1.0, 1.6)
    background_intensity: Range = (0.18, 0.28)
    cell_intensity: Range = (0.34, 0.44)
    vesicle_intensity: Range = (0.75, 0.95)
    mitochondrion_intensity: Range = (0.55, 0.7)
    aggregate_intensity: Range = (0.05, 1.0)
    noise_magnitude: float = Field(0.25, ge=0)

    @model_validator(mode="after")
    def _scene_valid(self):
        self.scene().validate()
        return self

    def scene(self, seed: int = 0) -> SceneConfig:
        fields = self.model_dump(exclude={"count"})
        return SceneConfig(**fields, seed=seed)


class DiffusionSection(_Strict):
    base_channels: int = Field(16, ge=1)
    channel_mults: tuple[int, int, int] = (1, 2, 4)
    T: int = Field(250, ge=2)
    epochs: int = Field(2000, ge=0)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-4, gt=0)
    checkpoint_every: int = Field(0, ge=0)


class LossWeightsSection(_Strict):
    visual: float = Field(1.0, ge=0)
    feature: float = Field(1.0, ge=0)
    invariance: float = Field(1.0, ge=0)


class SegmentationSection(_Strict):
    k: int = Field(2, ge=2)
    weights: LossWeightsSection = LossWeightsSection()
    gamma_range: Range = (0.9, 1.1)
    t: int = Field(25, ge=1)
    stages: tuple[int, ...] = (1, 2, 3)
    lr: float = Field(3e-4, gt=0)
    epochs: int = Field(100, ge=0)
    base_channels: int = Field(16, ge=1)
    standardize_features: bool = True

    @field_validator("gamma_range")
    @classmethod
    def _gamma(cls, v):
        if not 0 < v[0] <= v[1]:
            raise ValueError("need 0 < gamma_min <= gamma_max")
        return v

    @field_validator("stages")
    @classmethod
    def _stages(cls, v):
        if not v or any(s not in (1, 2, 3) for s in v):
            raise ValueError("stages must be a non-empty subset of {1, 2, 3}")
        return tuple(sorted(set(v)))


class EvalSection(_Strict):
    level: Literal[1, 2, 3] = 1
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    split: Literal["train", "val", "test"] = "test"

    @field_validator("spacing")
    @classmethod
    def _spacing(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("spacing must be positive")
        return v


class BaselineSection(_Strict):
    source: Literal["intensity", "features"] = "intensity"
    restarts: int = Field(5, ge=1)
    max_iter: int = Field(300, ge=1)
    tol: float = Field(1e-6, gt=0)


class RunConfig(_Strict):
    seed: int = 0
    dataset: DatasetSection = DatasetSection()
    diffusion: DiffusionSection = DiffusionSection()
    segmentation: SegmentationSection = SegmentationSection()
    eval: EvalSection = EvalSection()
    baseline: BaselineSection = BaselineSection()

    @model_validator(mode="after")
    def _k_covers_level(self):
        if self.segmentation.k < LEVEL_K[self.eval.level]:
            raise ValueError(
                f"segmentation.k={self.segmentation.k} cannot cover the {LEVEL_K[self.eval.level]} "
                f"classes of level {self.eval.level}"
            )
        if self.segmentation.t > self.diffusion.T:
            raise ValueError(f"segmentation.t={self.segmentation.t} exceeds diffusion.T={self.diffusion.T}")
        return self

    def resolved_yaml(self) -> str:
        return yaml.safe_dump(_plain(self.model_dump()), sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config(path: str | Path | None, seed: int | None = None) -> RunConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    if seed is not None:
        data = {**data, "seed": seed}
    return RunConfig.model_validate(data)


STREAMS = {"dataset": 1, "diffusion-train": 2, "feature-noise": 3, "seg-train": 4, "baseline": 5, "diffusion-init": 6}


def stream_seed(global_seed: int, stream: str) -> int:
    """Deterministic 62-bit seed for a named randomness sub-stream."""
    state = np.random.SeedSequence([global_seed, STREAMS[stream]]).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 30) ^ int(state[1])
