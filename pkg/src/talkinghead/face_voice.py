"""Speech teacher, face student and the masked margin softmax matching loss.

The teacher maps a log-mel spectrogram to a unit 1024-d speaker vector. The
student is a frozen face feature extractor (512-d) followed by a trainable
MLP projection (512 -> 2048 -> 1024) and L2 normalisation. Only the MLP is
trained, with the MMS loss pulling each face toward its own speaker's
teacher embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import BatchMismatch, EmptyCorpus, ShapeMismatch, TooShort

EMBED_DIM = 1024
FACE_FEATURES = 512
PROJ_HIDDEN = 2048
FACE_SIZE = 160
MIN_FRAMES = 10


class SpeechTeacher(nn.Module):
    """1-D conv stack over mel frames, mean+std pooling, linear to 1024, L2 norm."""

    def __init__(self, n_mels: int = 80, channels: int = 128, out_dim: int = EMBED_DIM):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv1d(n_mels, channels, 5, padding=2), nn.ReLU(), nn.BatchNorm1d(channels),
            nn.Conv1d(channels, channels, 3, padding=2, dilation=2), nn.ReLU(), nn.BatchNorm1d(channels),
            nn.Conv1d(channels, 2 * channels, 1), nn.ReLU(),
        )
        self.fc = nn.Linear(4 * channels, out_dim)

    def forward(self, mel):
        # mel: (B, T, n_mels)
        h = self.convs(mel.transpose(1, 2))
        stats = torch.cat([h.mean(dim=2), h.std(dim=2)], dim=1)
        return F.normalize(self.fc(stats), dim=-1)


class FaceExtractor(nn.Module):
    """Strided CNN, 3x160x160 -> 512 raw face features."""

    def __init__(self, out_dim: int = FACE_FEATURES):
        super().__init__()
        layers, c_in = [], 3
        for c_out in (16, 32, 64, 128):
            layers += [nn.Conv2d(c_in, c_out, 5, stride=2, padding=2), nn.BatchNorm2d(c_out), nn.ReLU()]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(c_in, out_dim)

    def forward(self, img):
        return self.fc(self.features(img).mean(dim=(2, 3)))


class FaceProjection(nn.Module):
    def __init__(self, in_dim: int = FACE_FEATURES, hidden: int = PROJ_HIDDEN, out_dim: int = EMBED_DIM):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        return F.normalize(self.fc2(F.relu(self.fc1(x))), dim=-1)


class FaceEncoder(nn.Module):
    def __init__(self, extractor: FaceExtractor | None = None, projection: FaceProjection | None = None):
        super().__init__()
        self.extractor = extractor or FaceExtractor()
        self.projection = projection or FaceProjection()

    def forward(self, img):
        return self.projection(self.extractor(img))


def prepare_face(img) -> torch.Tensor:
    """Resize (…, 3, H, W) images in [0, 1] to the encoder's 160x160 input."""
    x = torch.as_tensor(np.asarray(img), dtype=torch.float32)
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeMismatch(f"expected (3, H, W) images, got {tuple(x.shape)}")
    if x.shape[-2:] != (FACE_SIZE, FACE_SIZE):
        x = F.interpolate(x, size=(FACE_SIZE, FACE_SIZE), mode="bilinear", align_corners=False, antialias=True)
    return x[0] if squeeze else x


@torch.no_grad()
def embed_speech(mel, teacher: SpeechTeacher) -> torch.Tensor:
    """Unit-norm 1024-d speaker vector for a (T, n_mels) log-mel (or a batch)."""
    x = torch.as_tensor(np.asarray(mel), dtype=torch.float32)
    squeeze = x.dim() == 2
    if squeeze:
        x = x[None]
    if x.shape[1] < MIN_FRAMES:
        raise TooShort(f"need at least {MIN_FRAMES} mel frames, got {x.shape[1]}")
    teacher.eval()
    out = teacher(x)
    return out[0] if squeeze else out


@torch.no_grad()
def embed_face(img, encoder: FaceEncoder) -> torch.Tensor:
    """Unit-norm 1024-d vector for a 3x160x160 image (or a batch of them)."""
    x = torch.as_tensor(np.asarray(img), dtype=torch.float32)
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    if x.dim() != 4 or tuple(x.shape[1:]) != (3, FACE_SIZE, FACE_SIZE):
        raise ShapeMismatch(f"expected (3, {FACE_SIZE}, {FACE_SIZE}) image, got {tuple(x.shape[-3:])}")
    encoder.eval()
    out = encoder(x)
    return out[0] if squeeze else out


def mms_loss(face: torch.Tensor, speech: torch.Tensor, margin: float = 0.001, mask=None) -> torch.Tensor:
    """Masked margin softmax over the cosine similarity matrix, both directions.

    ``mask[i, j]`` marks same-identity pairs (i != j) that must not act as
    negatives. Each row's loss is the cross-entropy of ``S_ii - margin``
    against the unmasked ``S_ij``; rows are averaged and the face->speech and
    speech->face terms summed. Temperature is 1.
    """
    if face.shape[0] != speech.shape[0]:
        raise BatchMismatch(f"{face.shape[0]} faces vs {speech.shape[0]} utterances")
    n = face.shape[0]
    eye = torch.eye(n, dtype=torch.bool, device=face.device)
    mask = torch.zeros(n, n, dtype=torch.bool) if mask is None else torch.as_tensor(mask, dtype=torch.bool)
    mask = mask & ~eye
    sim = face @ speech.T
    target = torch.arange(n, device=face.device)
    total = face.new_zeros(())
    for s, m in ((sim, mask), (sim.T, mask.T)):
        logits = (s - margin * eye.to(s.dtype)).masked_fill(m, float("-inf"))
        total = total + F.cross_entropy(logits, target)
    return total


def margin_schedule(epoch: int, margin: float = 0.001, ramp_epochs: int = 10) -> float:
    """Linear ramp from 0 to ``margin`` over ``ramp_epochs`` epochs."""
    return margin * min(1.0, (epoch + 1) / ramp_epochs)


def identity_mask(labels) -> torch.Tensor:
    labels = torch.as_tensor(labels)
    return labels[:, None] == labels[None, :]


# ---------------------------------------------------------------------------
# training


@dataclass
class FaceVoiceConfig:
    teacher_steps: int = 150
    extractor_steps: int = 100
    projection_steps: int = 200
    batch: int = 8
    lr: float = 1e-3
    crop_frames: int = 64
    am_scale: float = 10.0
    am_margin: float = 0.2
    margin: float = 0.001
    ramp_epochs: int = 10
    steps_per_epoch: int = 20


class AMSoftmaxHead(nn.Module):
    """Additive-margin cosine softmax classifier used to pre-train the teacher."""

    def __init__(self, dim: int, n_classes: int, scale: float, margin: float):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_classes, dim) * 0.01)
        self.scale, self.margin = scale, margin

    def forward(self, emb, labels):
        cos = emb @ F.normalize(self.weight, dim=-1).T
        cos = cos - self.margin * F.one_hot(labels, cos.shape[1]).to(cos.dtype)
        return F.cross_entropy(self.scale * cos, labels)


def _random_crops(mels, idx, frames: int, gen: torch.Generator):
    out = []
    for i in idx:
        m = mels[i]
        start = int(torch.randint(0, max(1, m.shape[0] - frames + 1), (1,), generator=gen))
        out.append(m[start:start + frames])
    return torch.stack(out)


def pretrain_teacher(mels, labels, cfg: FaceVoiceConfig, seed: int = 0) -> tuple[SpeechTeacher, list[float]]:
    """Speaker classification pre-training of the teacher with an additive-margin softmax."""
    if not len(mels):
        raise EmptyCorpus("no utterances to train the teacher on")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    mels = [torch.as_tensor(np.asarray(m), dtype=torch.float32) for m in mels]
    labels = torch.as_tensor(labels)
    teacher = SpeechTeacher()
    head = AMSoftmaxHead(EMBED_DIM, int(labels.max()) + 1, cfg.am_scale, cfg.am_margin)
    opt = torch.optim.Adam([*teacher.parameters(), *head.parameters()], lr=cfg.lr)
    history = []
    teacher.train()
    for _ in range(cfg.teacher_steps):
        idx = torch.randint(0, len(mels), (cfg.batch,), generator=gen)
        loss = head(teacher(_random_crops(mels, idx, cfg.crop_frames, gen)), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    teacher.eval()
    return teacher, history


def pretrain_face_extractor(images, labels, cfg: FaceVoiceConfig, seed: int = 0) -> tuple[FaceExtractor, list[float]]:
    """Identity classification pre-training of the stand-in face feature extractor."""
    if not len(images):
        raise EmptyCorpus("no face images to train the extractor on")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    images = prepare_face(np.stack(images))
    labels = torch.as_tensor(labels)
    extractor = FaceExtractor()
    head = nn.Linear(FACE_FEATURES, int(labels.max()) + 1)
    opt = torch.optim.Adam([*extractor.parameters(), *head.parameters()], lr=cfg.lr)
    history = []
    extractor.train()
    for _ in range(cfg.extractor_steps):
        idx = torch.randint(0, len(images), (cfg.batch,), generator=gen)
        loss = F.cross_entropy(head(extractor(images[idx])), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    extractor.eval()
    return extractor, history


def train_face_encoder(faces, mels, labels, teacher: SpeechTeacher, extractor: FaceExtractor,
                       cfg: FaceVoiceConfig, seed: int = 0,
                       projection: FaceProjection | None = None, start_step: int = 0, on_step=None,
                       optimizer: torch.optim.Optimizer | None = None):
    """Train the projection MLP with the MMS loss; teacher and extractor stay frozen.

    ``faces[i]`` and ``mels[i]`` form a pair from identity ``labels[i]``.
    Returns the assembled :class:`FaceEncoder` and the per-step loss history.
    Batches come from a generator seeded per step, so passing the saved
    ``projection``, ``optimizer`` and ``start_step`` resumes exactly.
    """
    if not len(faces) or len(faces) != len(mels):
        raise EmptyCorpus("need a non-empty set of face/utterance pairs")
    for p in [*teacher.parameters(), *extractor.parameters()]:
        p.requires_grad_(False)
    teacher.eval()
    extractor.eval()
    with torch.no_grad():
        feats = extractor(prepare_face(np.stack(faces)))
        targets = embed_speech(np.stack(mels), teacher)
    labels = torch.as_tensor(labels)
    if projection is None:
        torch.manual_seed(seed)
        projection = FaceProjection()
    opt = optimizer or torch.optim.Adam(projection.parameters(), lr=cfg.lr)
    encoder = FaceEncoder(extractor, projection)
    history = []
    for step in range(start_step, cfg.projection_steps):
        gen = torch.Generator().manual_seed(seed * 1_000_003 + step)
        idx = torch.randperm(len(feats), generator=gen)[: cfg.batch]
        margin = margin_schedule(step // cfg.steps_per_epoch, cfg.margin, cfg.ramp_epochs)
        loss = mms_loss(projection(feats[idx]), targets[idx], margin, identity_mask(labels[idx]))
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if on_step is not None:
            on_step(step, loss.item())
    return encoder, history


def retrieval_accuracy(face_emb, speech_emb, face_labels, speech_labels) -> float:
    """Top-1: fraction of faces whose most similar utterance has the same identity."""
    sim = torch.as_tensor(face_emb) @ torch.as_tensor(speech_emb).T
    best = sim.argmax(dim=1)
    return float((torch.as_tensor(speech_labels)[best] == torch.as_tensor(face_labels)).float().mean())
