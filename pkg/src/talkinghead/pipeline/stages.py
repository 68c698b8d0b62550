"""Per-stage training entry points with checkpointing, resume and JSON-lines logs."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from .. import face_voice as fv
from .. import landmark_gen as lg
from .. import renderer as rd
from ..data import synth
from ..data.corpus import load_corpus, split_corpus
from ..errors import EmptyCorpus, InvalidConfig, MissingPrerequisite
from ..io import atomic_write_bytes
from ..tts import model as tm
from ..tts.text import load_lexicon, phonemize
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import STAGES, PipelineConfig

log = logging.getLogger(__name__)


class _Stop(Exception):
    """Raised from a step callback once the requested step has been checkpointed."""


def checkpoint_path(cfg: PipelineConfig, stage: str) -> Path:
    return cfg.output_path / "checkpoints" / f"{stage}.ckpt"


def log_path(cfg: PipelineConfig, stage: str) -> Path:
    return cfg.output_path / "logs" / f"{stage}.jsonl"


class StepLog:
    """Append-only JSON-lines loss log; on resume, entries past the checkpoint are dropped."""

    def __init__(self, path: Path, keep_before: int):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        kept = []
        if keep_before > 0 and path.exists():
            kept = [line for line in path.read_text().splitlines()
                    if line.strip() and json.loads(line)["step"] < keep_before]
        atomic_write_bytes(path, "".join(line + "\n" for line in kept).encode())

    def write(self, step: int, losses: dict, **extra) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps({"step": step, **extra, "losses": losses}) + "\n")


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def training_clips(cfg: PipelineConfig):
    clips = load_corpus(cfg.corpus_dir)
    if not clips:
        raise EmptyCorpus(f"corpus at {cfg.corpus_dir} has no clips")
    train, _, _ = split_corpus(clips, cfg.seed)
    return train or clips


class _Runner:
    """Shared bookkeeping: checkpoint cadence, stop-after-step and logging."""

    def __init__(self, cfg: PipelineConfig, stage: str, start: int, until: int | None):
        self.cfg, self.stage, self.until = cfg, stage, until
        self.path = checkpoint_path(cfg, stage)
        self.log = StepLog(log_path(cfg, stage), start)
        self.hash = cfg.stage_hash(stage)

    def save(self, step: int, modules: dict, optimizers: dict, extra: dict) -> Checkpoint:
        ckpt = Checkpoint(self.stage, step, self.hash,
                          {k: m.state_dict() for k, m in modules.items()},
                          {k: o.state_dict() for k, o in optimizers.items()}, extra)
        save_checkpoint(self.path, ckpt)
        return ckpt

    def step_callback(self, total: int, modules: dict, optimizers: dict, extra: dict):
        def on_step(step, losses):
            losses = losses if isinstance(losses, dict) else {"loss": losses}
            self.log.write(step, losses)
            done = step + 1
            stop = self.until is not None and done >= self.until
            if stop or done % self.cfg.checkpoint_every == 0 or done == total:
                self.save(done, modules, optimizers, extra)
            if stop and done < total:
                raise _Stop
        return on_step


def _resume_state(cfg: PipelineConfig, stage: str, resume: bool) -> Checkpoint | None:
    path = checkpoint_path(cfg, stage)
    if not resume or not path.exists():
        return None
    return load_checkpoint(path, expected_hash=cfg.stage_hash(stage))


# ---------------------------------------------------------------------------
# face_voice


def _face_voice_config(cfg: PipelineConfig) -> fv.FaceVoiceConfig:
    s = cfg.face_voice
    return fv.FaceVoiceConfig(teacher_steps=s.teacher_steps, extractor_steps=s.extractor_steps,
                              projection_steps=s.projection_steps, batch=s.batch, lr=s.lr,
                              margin=s.margin, ramp_epochs=s.ramp_epochs)


def load_face_voice(cfg: PipelineConfig):
    ckpt = load_checkpoint(checkpoint_path(cfg, "face_voice"))
    teacher, extractor, projection = fv.SpeechTeacher(), fv.FaceExtractor(), fv.FaceProjection()
    if "teacher" not in ckpt.modules:
        raise MissingPrerequisite("face_voice checkpoint has no trained teacher yet")
    teacher.load_state_dict(ckpt.modules["teacher"])
    if "extractor" in ckpt.modules:
        extractor.load_state_dict(ckpt.modules["extractor"])
    if "projection" in ckpt.modules:
        projection.load_state_dict(ckpt.modules["projection"])
    return teacher.eval(), fv.FaceEncoder(extractor, projection).eval(), ckpt


def _train_face_voice(cfg, clips, ckpt, until):
    fcfg = _face_voice_config(cfg)
    n_teacher, n_extract = fcfg.teacher_steps, fcfg.extractor_steps
    total = n_teacher + n_extract + fcfg.projection_steps
    start = ckpt.step if ckpt else 0
    run = _Runner(cfg, "face_voice", start, until)
    labels = [c.identity.index for c in clips]
    mels = [c.mel for c in clips]
    faces = [c.face for c in clips]
    modules, optims = {}, {}

    # the two pre-training phases run as units; checkpoints land on their boundaries
    teacher = fv.SpeechTeacher()
    if start >= n_teacher:
        teacher.load_state_dict(ckpt.modules["teacher"])
    else:
        teacher, hist = fv.pretrain_teacher(mels, labels, fcfg, seed=cfg.seed)
        for i, loss in enumerate(hist):
            run.log.write(i, {"am_softmax": loss}, phase="teacher")
        start = n_teacher
        run.save(start, {"teacher": teacher}, {}, {"phase": "extractor"})
        if until is not None and start >= until and start < total:
            return load_checkpoint(run.path)
    modules["teacher"] = teacher.eval()

    extractor = fv.FaceExtractor()
    if start >= n_teacher + n_extract:
        extractor.load_state_dict(ckpt.modules["extractor"])
    else:
        extractor, hist = fv.pretrain_face_extractor(faces, labels, fcfg, seed=cfg.seed + 1)
        for i, loss in enumerate(hist):
            run.log.write(n_teacher + i, {"cross_entropy": loss}, phase="extractor")
        start = n_teacher + n_extract
        run.save(start, {"teacher": teacher, "extractor": extractor}, {}, {"phase": "projection"})
        if until is not None and start >= until and start < total:
            return load_checkpoint(run.path)
    modules["extractor"] = extractor.eval()

    torch.manual_seed(cfg.seed + 2)
    projection = fv.FaceProjection()
    opt = torch.optim.Adam(projection.parameters(), lr=fcfg.lr)
    if ckpt is not None and "projection" in ckpt.modules and ckpt.step > n_teacher + n_extract:
        projection.load_state_dict(ckpt.modules["projection"])
        opt.load_state_dict(ckpt.optimizers["projection"])
    modules["projection"] = projection
    optims["projection"] = opt
    offset = n_teacher + n_extract
    inner = run.step_callback(total, modules, optims, {"phase": "projection"})
    try:
        fv.train_face_encoder(faces, mels, labels, teacher, extractor, fcfg, seed=cfg.seed + 2,
                              projection=projection, start_step=start - offset, optimizer=opt,
                              on_step=lambda s, loss: inner(offset + s, {"mms": loss}))
    except _Stop:
        pass
    if fcfg.projection_steps == 0:
        run.save(total, modules, optims, {"phase": "done"})
    return load_checkpoint(run.path)


# ---------------------------------------------------------------------------
# tts


def tts_config(cfg: PipelineConfig) -> tm.TtsConfig:
    s = cfg.tts
    return tm.TtsConfig(dropout=s.dropout, reduction=s.reduction, attn_components=s.attn_components)


def _train_tts(cfg, clips, ckpt, until):
    if not checkpoint_path(cfg, "face_voice").exists():
        raise MissingPrerequisite("the tts stage needs the face_voice teacher; train face_voice first")
    teacher, _, _ = load_face_voice(cfg)
    lex = load_lexicon(cfg.language)
    seqs = [phonemize(c.text, lex) for c in clips]
    with torch.no_grad():
        speakers = [fv.embed_speech(c.mel, teacher).numpy() for c in clips]
    tcfg = tts_config(cfg)
    torch.manual_seed(cfg.seed)
    model = tm.Tacotron(tcfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.tts.lr)
    start = 0
    if ckpt is not None:
        model.load_state_dict(ckpt.modules["tts"])
        opt.load_state_dict(ckpt.optimizers["tts"])
        start = ckpt.step
    run = _Runner(cfg, "tts", start, until)
    total = cfg.tts.steps
    on_step = run.step_callback(total, {"tts": model}, {"tts": opt}, {"tts_config": tcfg.to_dict()})
    try:
        tm.train_tts(model, seqs, [c.mel for c in clips], speakers, total, lr=cfg.tts.lr, seed=cfg.seed,
                     batch=cfg.tts.batch, optimizer=opt, start_step=start, on_step=on_step)
    except _Stop:
        pass
    if total == start:
        run.save(total, {"tts": model}, {"tts": opt}, {"tts_config": tcfg.to_dict()})
    return load_checkpoint(run.path)


# ---------------------------------------------------------------------------
# landmark


def landmark_config(cfg: PipelineConfig) -> lg.LandmarkConfig:
    s = cfg.landmark
    return lg.desk_config(lr=s.lr) if s.widths == "desk" else lg.LandmarkConfig(lr=s.lr)


def _train_landmark(cfg, clips, ckpt, until):
    lengths = {len(c.mel) for c in clips}
    if len(lengths) != 1:
        raise InvalidConfig(f"landmark training needs equal-length clips, found lengths {sorted(lengths)}")
    tracks = [lg.make_track(c.mel, c.landmarks) for c in clips]
    lcfg = landmark_config(cfg)
    torch.manual_seed(cfg.seed)
    model = lg.LandmarkGenerator(lcfg)
    opt = torch.optim.Adam(model.parameters(), lr=lcfg.lr)
    start = 0
    if ckpt is not None:
        model.load_state_dict(ckpt.modules["landmark"])
        opt.load_state_dict(ckpt.optimizers["landmark"])
        start = ckpt.step
    run = _Runner(cfg, "landmark", start, until)
    total = cfg.landmark.steps
    extra = {"landmark_config": lcfg.to_dict()}
    on_step = run.step_callback(total, {"landmark": model}, {"landmark": opt}, extra)
    try:
        lg.train_landmarks(model, tracks, total, seed=cfg.seed, batch=cfg.landmark.batch, optimizer=opt,
                           start_step=start, on_step=on_step)
    except _Stop:
        pass
    if total == start:
        run.save(total, {"landmark": model}, {"landmark": opt}, extra)
    return load_checkpoint(run.path)


# ---------------------------------------------------------------------------
# renderer


def renderer_config(cfg: PipelineConfig) -> rd.RendererConfig:
    s = cfg.renderer
    return rd.RendererConfig(base_channels=s.base_channels, depth=s.depth, disc_channels=s.base_channels,
                             lr_g=s.lr_g, lr_d=s.lr_d)


def renderer_pairs(clips, frames_per_clip: int, seed: int):
    """Condition stacks and target photos for randomly chosen frames of each clip."""
    stacks, targets = [], []
    references = {}
    for k, clip in enumerate(clips):
        ident = clip.identity
        if ident.index not in references:
            references[ident.index] = synth.render_face(ident, ident.neutral_landmarks())
        gen = np.random.default_rng([seed, k])
        for f in gen.choice(len(clip.landmarks), size=min(frames_per_clip, len(clip.landmarks)), replace=False):
            sketch = rd.rasterize_sketch(clip.landmarks[f])
            stacks.append(rd.stack_condition(sketch, references[ident.index]))
            targets.append(synth.render_face(ident, clip.landmarks[f], clip.quats[f]))
    return np.stack(stacks), np.stack(targets)


def _train_renderer(cfg, clips, ckpt, until):
    rcfg = renderer_config(cfg)
    stacks, targets = renderer_pairs(clips, cfg.renderer.frames_per_clip, cfg.seed)
    torch.manual_seed(cfg.seed)
    gen = rd.UNet(base=rcfg.base_channels, depth=rcfg.depth)
    disc = rd.PatchDiscriminator(base=rcfg.disc_channels)
    opt_g = torch.optim.Adam(gen.parameters(), lr=rcfg.lr_g, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=rcfg.lr_d, betas=(0.5, 0.999))
    start = 0
    if ckpt is not None:
        gen.load_state_dict(ckpt.modules["generator"])
        disc.load_state_dict(ckpt.modules["discriminator"])
        opt_g.load_state_dict(ckpt.optimizers["generator"])
        opt_d.load_state_dict(ckpt.optimizers["discriminator"])
        start = ckpt.step
    run = _Runner(cfg, "renderer", start, until)
    total = cfg.renderer.steps
    modules = {"generator": gen, "discriminator": disc}
    optims = {"generator": opt_g, "discriminator": opt_d}
    extra = {"renderer_config": rcfg.to_dict()}
    on_step = run.step_callback(total, modules, optims, extra)
    try:
        rd.train_renderer(gen, disc, stacks, targets, total, rcfg, seed=cfg.seed, batch=cfg.renderer.batch,
                          optimizers=(opt_g, opt_d), start_step=start, on_step=on_step)
    except _Stop:
        pass
    if total == start:
        run.save(total, modules, optims, extra)
    return load_checkpoint(run.path)


_TRAINERS = {
    "face_voice": _train_face_voice,
    "tts": _train_tts,
    "landmark": _train_landmark,
    "renderer": _train_renderer,
}


def train_stage(stage: str, cfg: PipelineConfig, resume: bool = False, until: int | None = None) -> Checkpoint:
    """Train one stage from the corpus in ``cfg.corpus_dir``.

    With ``resume`` an existing checkpoint (whose config hash must match) is
    continued from its step. ``until`` stops after that many steps, leaving a
    checkpoint behind.
    """
    if stage not in STAGES:
        raise InvalidConfig(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    ckpt = _resume_state(cfg, stage, resume)
    clips = training_clips(cfg)
    log.info("training %s on %d clips from step %d", stage, len(clips), ckpt.step if ckpt else 0)
    return _TRAINERS[stage](cfg, clips, ckpt, until)
