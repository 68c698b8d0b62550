"""Configuration, per-stage training, generation and evaluation."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import STAGES, PipelineConfig, load_config, parse_config
from .evaluate import evaluate
from .generate import generate, select_frames
from .stages import checkpoint_path, log_path, read_log, train_stage

__all__ = [
    "STAGES", "Checkpoint", "PipelineConfig", "checkpoint_path", "evaluate", "generate", "load_checkpoint",
    "load_config", "log_path", "parse_config", "read_log", "save_checkpoint", "select_frames", "train_stage",
]
