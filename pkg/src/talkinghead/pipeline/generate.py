"""Text + still face -> watermarked frames, WAV and manifest."""

from __future__ import annotations

import shlex
import subprocess
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .. import face_voice as fv
from .. import geometry as geo
from .. import io
from .. import landmark_gen as lg
from .. import renderer as rd
from ..data.audio import DEFAULT_STFT
from ..data.corpus import write_sequence_json
from ..errors import MissingPrerequisite, ShapeMismatch
from ..tts import model as tm
from ..tts.text import load_lexicon, phonemize
from ..tts.vocoder import griffin_lim, log_mel_to_linear
from .checkpoint import load_checkpoint
from .config import STAGES, PipelineConfig
from .stages import checkpoint_path, load_face_voice


def select_frames(n_mel: int, duration: float, fps: float, cfg=DEFAULT_STFT) -> np.ndarray:
    """Nearest mel frame for each output frame time; ``round(duration * fps)`` indices.

    Mel frame ``i`` is centred at ``(i * hop + win / 2) / sr`` seconds and
    output frame ``k`` is shown at ``k / fps``. For ``fps <= 30`` the result is
    strictly increasing for any stream of two or more mel frames, since
    consecutive picks are at least 2.6 mel frames apart.
    """
    count = int(round(duration * fps))
    times = np.arange(count) / fps
    centre = cfg.win_length / 2 / cfg.sample_rate
    idx = np.rint((times - centre) * cfg.frame_rate).astype(int)
    return np.clip(idx, 0, n_mel - 1)


@dataclass
class Models:
    teacher: fv.SpeechTeacher
    face_encoder: fv.FaceEncoder
    tts: tm.Tacotron
    landmark: lg.LandmarkGenerator
    generator: rd.UNet


def load_models(cfg: PipelineConfig) -> Models:
    missing = [s for s in STAGES if not checkpoint_path(cfg, s).exists()]
    if missing:
        raise MissingPrerequisite(f"generate needs trained checkpoints for: {', '.join(missing)}")
    teacher, face_encoder, _ = load_face_voice(cfg)

    ck = load_checkpoint(checkpoint_path(cfg, "tts"))
    tts = tm.Tacotron(tm.TtsConfig(**ck.extra["tts_config"]))
    tts.load_state_dict(ck.modules["tts"])

    ck = load_checkpoint(checkpoint_path(cfg, "landmark"))
    lcfg = dict(ck.extra["landmark_config"])
    lcfg["conv_widths"] = tuple(lcfg["conv_widths"])
    landmark = lg.LandmarkGenerator(lg.LandmarkConfig(**lcfg))
    landmark.load_state_dict(ck.modules["landmark"])

    ck = load_checkpoint(checkpoint_path(cfg, "renderer"))
    rcfg = rd.RendererConfig(**ck.extra["renderer_config"])
    generator = rd.UNet(base=rcfg.base_channels, depth=rcfg.depth)
    generator.load_state_dict(ck.modules["generator"])
    return Models(teacher, face_encoder.eval(), tts.eval(), landmark.eval(), generator.eval())


def _peak_normalise(wav: np.ndarray, peak: float = 0.95) -> np.ndarray:
    top = float(np.max(np.abs(wav))) if len(wav) else 0.0
    return wav * (peak / top) if top > peak else wav


def generate(text: str, face_image_path, landmarks_path, cfg: PipelineConfig, out_dir=None,
             models: Models | None = None) -> dict:
    """Run the full pipeline and write the artifact bundle; returns the manifest."""
    out = Path(out_dir) if out_dir is not None else cfg.output_path / "generated"
    models = models or load_models(cfg)
    torch.manual_seed(cfg.seed)
    notes: list[str] = []

    face = io.read_png(face_image_path)
    if face.shape != (3, rd.IMAGE_SIZE, rd.IMAGE_SIZE):
        raise ShapeMismatch(f"face image must be {rd.IMAGE_SIZE}x{rd.IMAGE_SIZE} RGB, got {face.shape}")
    image_landmarks, _ = geo.read_landmark_frame(landmarks_path)
    ids = phonemize(text, load_lexicon(cfg.language))

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        spk = fv.embed_face(fv.prepare_face(face), models.face_encoder)
        result = models.tts.synthesize(ids, spk, max_frames=cfg.tts.max_frames)
        mel = result.mel.numpy()
        wav = griffin_lim(log_mel_to_linear(mel), n_iters=cfg.tts.griffin_lim_iters, seed=cfg.seed)
        wav = _peak_normalise(wav)
        points, quats = lg.generate(models.landmark, mel, image_landmarks)
        duration = len(wav) / DEFAULT_STFT.sample_rate
        picks = select_frames(len(mel), duration, cfg.output_fps)
        frames_dir = out / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)
        for stale in frames_dir.glob("frame_*.png"):
            stale.unlink()
        for k, i in enumerate(picks):
            sketch = rd.rasterize_sketch(points[i])
            frame = rd.generate_frame(rd.stack_condition(sketch, face), models.generator)
            if cfg.watermark:
                frame = rd.apply_watermark(frame)
            io.write_png(frames_dir / f"frame_{k:05d}.png", frame)
    for w in caught:
        note = f"{type(w.message).__name__}: {w.message}"
        if note not in notes:
            notes.append(note)

    io.write_wav(out / "audio.wav", wav, DEFAULT_STFT.sample_rate)
    io.write_mel(out / "speech.mel", mel, DEFAULT_STFT.hop_ms, DEFAULT_STFT.win_ms)
    write_sequence_json(out / "landmarks.json", points, quats, DEFAULT_STFT.frame_rate,
                        source_mel="speech.mel", base_image=str(face_image_path))
    manifest = {
        "fps": cfg.output_fps,
        "count": int(len(picks)),
        "audio_path": "audio.wav",
        "duration": duration,
        "frames_dir": "frames",
        "frame_indices": [int(i) for i in picks],
        "mel_frames": int(len(mel)),
        "stop_step": int(result.stop_step),
        "stopped": bool(result.stopped),
        "text": text,
        "seed": cfg.seed,
        "watermark": cfg.watermark,
        "warnings": notes,
    }
    io.write_json(out / "manifest.json", manifest)
    if cfg.mux_command:
        run_mux(cfg.mux_command, out, cfg.output_fps)
    return manifest


def run_mux(template: str, out: Path, fps: float) -> None:
    """Hand frames and audio to an external muxer, e.g.
    ``ffmpeg -y -framerate {fps} -i {frames}/frame_%05d.png -i {audio} {video}``."""
    fields = {"fps": fps, "frames": out / "frames", "audio": out / "audio.wav", "video": out / "video.mp4"}
    argv = [part.format(**fields) for part in shlex.split(template)]
    subprocess.run(argv, check=True)
