"""Validated pipeline configuration."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from ..errors import InvalidConfig

OUTPUT_DIR_ENV = "TALKINGHEAD_OUTPUT_DIR"
STAGES = ("face_voice", "tts", "landmark", "renderer")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FaceVoiceStage(_Strict):
    teacher_steps: int = Field(150, ge=0)
    extractor_steps: int = Field(100, ge=0)
    projection_steps: int = Field(200, ge=0)
    batch: int = Field(8, ge=2)
    lr: float = Field(1e-3, gt=0)
    margin: float = Field(0.001, ge=0)
    ramp_epochs: int = Field(10, ge=1)


class TtsStage(_Strict):
    steps: int = Field(1500, ge=0)
    lr: float = Field(2e-3, gt=0)
    batch: int = Field(8, ge=1)
    dropout: float = Field(0.1, ge=0, lt=1)
    reduction: int = Field(2, ge=1)
    attn_components: int = Field(5, ge=1)
    max_frames: int = Field(400, ge=1)
    griffin_lim_iters: int = Field(60, ge=0)


class LandmarkStage(_Strict):
    steps: int = Field(2000, ge=0)
    lr: float = Field(1e-3, gt=0)
    batch: int | None = Field(8, ge=1)
    widths: Literal["desk", "full"] = "desk"


class RendererStage(_Strict):
    steps: int = Field(500, ge=0)
    lr_g: float = Field(2e-3, gt=0)
    lr_d: float = Field(2e-4, gt=0)
    base_channels: int = Field(16, ge=4)
    depth: int = Field(5, ge=1, le=8)
    frames_per_clip: int = Field(4, ge=1)
    batch: int = Field(1, ge=1)


class PipelineConfig(_Strict):
    seed: int
    corpus_dir: str = "corpus"
    output_dir: str = "runs"
    language: Literal["toy"] = "toy"
    output_fps: float = Field(25.0, gt=0, le=30)
    mux_command: str | None = None
    watermark: bool = True
    checkpoint_every: int = Field(100, ge=1)
    face_voice: FaceVoiceStage = FaceVoiceStage()
    tts: TtsStage = TtsStage()
    landmark: LandmarkStage = LandmarkStage()
    renderer: RendererStage = RendererStage()

    @field_validator("seed")
    @classmethod
    def _seed_range(cls, v: int) -> int:
        if not 0 <= v < 2**63:
            raise ValueError("seed must be a non-negative 63-bit integer")
        return v

    @property
    def output_path(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)

    def stage_hash(self, stage: str) -> str:
        """Hash of everything that shapes a stage's trajectory except its step budget.

        Leaving step counts out lets a finished run be extended by raising
        the budget and resuming.
        """
        if stage not in STAGES:
            raise InvalidConfig(f"unknown stage {stage!r}")
        body = getattr(self, stage).model_dump()
        for key in [k for k in body if k.endswith("steps")]:
            body.pop(key)
        payload = {"stage": stage, "seed": self.seed, "language": self.language, "params": body}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise InvalidConfig(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc
    return parse_config(raw)


def parse_config(raw: dict) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(map(str, e['loc'])) or '<root>'}: {e['msg']}" for e in exc.errors())
        raise InvalidConfig(problems) from exc
