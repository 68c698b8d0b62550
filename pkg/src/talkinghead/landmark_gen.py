"""Mel-to-landmark generation: condition encoders, CNN-BLSTM decoder, quaternion smoother.

Per frame the decoder predicts a 140-d vector: 136 frontal x/y displacements
and 4 quaternion changes. Displacements are added to the base frame's
frontal landmarks, quaternion changes (after the smoothing LSTM) to the base
quaternion; the sum is renormalised and used to rotate the displaced
landmarks back into the image pose.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import geometry as geo
from .errors import ShapeMismatch, TooShort, ZeroQuaternion

N_MELS = 80
AUDIO_DIM, LANDMARK_DIM, QUAT_DIM = 512, 128, 4
COND_DIM = AUDIO_DIM + LANDMARK_DIM + QUAT_DIM
OUT_DIM = 136 + 4
FULL_CONV_WIDTHS = (512, 512, 1024, 1024, 1024, 2048)


@dataclass
class LandmarkConfig:
    context: int = 4                      # +-frames stacked before the audio encoder
    conv_widths: tuple = FULL_CONV_WIDTHS
    kernel: int = 3
    blstm: int = 256                      # per direction
    mlp_hidden: int = 512
    smoother: int = 64
    condition_skip: bool = True           # re-inject base embeddings after the conv block
    lr: float = 1e-3
    lr_final: float = 0.01                # cosine decay to this fraction of lr
    out_init_scale: float = 0.01          # shrink the last decoder layer so training starts near the base face
    mel_floor: float = float(np.log(1e-3))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        return d


def desk_config(**overrides) -> LandmarkConfig:
    """Narrow widths that train in minutes on one CPU core."""
    base = dict(conv_widths=(64, 64, 128, 128, 128, 256), blstm=64, mlp_hidden=128)
    base.update(overrides)
    return LandmarkConfig(**base)


class MLPEncoder(nn.Module):
    """Linear -> LayerNorm -> LeakyReLU -> Linear."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        return self.fc2(F.leaky_relu(self.norm(self.fc1(x)), 0.2))


def stack_context(mel: torch.Tensor, context: int, floor: float) -> torch.Tensor:
    """(B, T, n_mels) -> (B, T, (2c+1) * n_mels), edges padded with the log floor."""
    if context == 0:
        return mel
    padded = F.pad(mel.transpose(1, 2), (context, context), value=floor).transpose(1, 2)
    t = mel.shape[1]
    return torch.cat([padded[:, k:k + t] for k in range(2 * context + 1)], dim=-1)


class ConditionEncoder(nn.Module):
    def __init__(self, cfg: LandmarkConfig):
        super().__init__()
        self.cfg = cfg
        self.audio = MLPEncoder((2 * cfg.context + 1) * N_MELS, 512, AUDIO_DIM)
        self.landmark = MLPEncoder(136, 256, LANDMARK_DIM)
        self.quat = MLPEncoder(4, 64, QUAT_DIM)

    def forward(self, mel, base_lm, base_q):
        """mel (B, T, 80), base_lm (B, 136) frontal x/y, base_q (B, 4) -> (B, T, 644)."""
        if mel.dim() != 3 or mel.shape[-1] != N_MELS:
            raise ShapeMismatch(f"expected (B, T, {N_MELS}) mel, got {tuple(mel.shape)}")
        if base_lm.shape[-1] != 136 or base_q.shape[-1] != 4:
            raise ShapeMismatch("base landmarks must be 136-d and base quaternion 4-d")
        t = mel.shape[1]
        audio = self.audio(stack_context(mel, self.cfg.context, self.cfg.mel_floor))
        lm = self.landmark(base_lm)[:, None].expand(-1, t, -1)
        q = self.quat(base_q)[:, None].expand(-1, t, -1)
        return torch.cat([audio, lm, q], dim=-1)


class InstanceNorm(nn.Module):
    """Per-sequence, per-channel normalisation with an affine map.

    Unlike the built-in norms this accepts a single frame, where every
    normalised value is 0 and the output is the bias.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):  # (B, C, T)
        mean = x.mean(dim=-1, keepdim=True)
        var = x.var(dim=-1, unbiased=False, keepdim=True)
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight[:, None] + self.bias[:, None]


class LandmarkDecoder(nn.Module):
    """Six same-padded temporal convs (instance norm, then batch norm) -> BLSTM -> MLP -> 140."""

    def __init__(self, cfg: LandmarkConfig):
        super().__init__()
        self.cfg = cfg
        layers, c_in = [], COND_DIM
        for i, width in enumerate(cfg.conv_widths):
            norm = InstanceNorm(width) if i == 0 else nn.BatchNorm1d(width)
            layers.append(nn.ModuleDict({
                "conv": nn.Conv1d(c_in, width, cfg.kernel, padding=cfg.kernel // 2),
                "norm": norm,
            }))
            c_in = width
        self.convs = nn.ModuleList(layers)
        skip = LANDMARK_DIM + QUAT_DIM if cfg.condition_skip else 0
        self.blstm = nn.LSTM(c_in + skip, cfg.blstm, batch_first=True, bidirectional=True)
        self.mlp = MLPEncoder(2 * cfg.blstm, cfg.mlp_hidden, OUT_DIM)
        with torch.no_grad():
            self.mlp.fc2.weight.mul_(cfg.out_init_scale)
            self.mlp.fc2.bias.zero_()

    def forward(self, cond):
        y = cond.transpose(1, 2)
        for layer in self.convs:
            y = F.leaky_relu(layer["norm"](layer["conv"](y)), 0.2)
        y = y.transpose(1, 2)
        if self.cfg.condition_skip:
            y = torch.cat([y, cond[..., AUDIO_DIM:]], dim=-1)
        out = self.mlp(self.blstm(y)[0])
        return out[..., :136], out[..., 136:]


class QuaternionSmoother(nn.Module):
    def __init__(self, hidden: int = 64):
        super().__init__()
        self.lstm = nn.LSTM(4, hidden, batch_first=True)
        self.proj = nn.Linear(hidden, 4)

    def forward(self, dq):
        return self.proj(self.lstm(dq)[0])


class LandmarkSequence(NamedTuple):
    points: torch.Tensor     # (B, T, 68, 3) posed landmarks
    quats: torch.Tensor      # (B, T, 4) unit quaternions
    frontal: torch.Tensor    # (B, T, 136) displaced frontal x/y, the regression output


def quat_to_matrix_torch(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).view(*q.shape[:-1], 3, 3)


def compose_sequence(base_frontal, base_q, dp, dq, centroid=None) -> LandmarkSequence:
    """Add displacements to the base and rotate.

    base_frontal (B, 68, 3) centred frontal landmarks; the depth coordinate of
    the base is kept since displacements are 2-D. ``centroid`` (B, 3) is
    added back after rotation (zero if omitted).
    """
    b, t = dp.shape[:2]
    frontal = base_frontal[:, None, :, :2].reshape(b, 1, 136) + dp
    pts = torch.cat([frontal.view(b, t, 68, 2), base_frontal[:, None, :, 2:].expand(b, t, 68, 1)], dim=-1)
    q = base_q[:, None] + dq
    norm = q.norm(dim=-1, keepdim=True)
    if bool((norm <= 1e-12).any()):
        raise ZeroQuaternion("base quaternion plus change vanished")
    q = q / norm
    posed = pts @ quat_to_matrix_torch(q).transpose(-1, -2)
    if centroid is not None:
        posed = posed + centroid[:, None, None]
    return LandmarkSequence(posed, q, frontal)


class LandmarkGenerator(nn.Module):
    def __init__(self, cfg: LandmarkConfig | None = None):
        super().__init__()
        self.cfg = cfg or LandmarkConfig()
        self.encoder = ConditionEncoder(self.cfg)
        self.decoder = LandmarkDecoder(self.cfg)
        self.smoother = QuaternionSmoother(self.cfg.smoother)

    def forward(self, mel, base_frontal, base_q, centroid=None) -> LandmarkSequence:
        base_xy = base_frontal[..., :2].reshape(base_frontal.shape[0], 136)
        cond = self.encoder(mel, base_xy, base_q)
        dp, dq_raw = self.decoder(cond)
        return compose_sequence(base_frontal, base_q, dp, self.smoother(dq_raw), centroid)


# ---------------------------------------------------------------------------
# losses


def landmark_losses(p_hat, q_hat, p, q) -> dict:
    """Squared-L2 regression, pairwise inter-frame and L1 quaternion losses.

    p_hat, p: (N, T, 136) or (N, T, 68, 2); q_hat, q: (N, T, 4). Sums over
    batch, time and points; the quaternion term starts at the second frame.
    """
    if p_hat.shape != p.shape or q_hat.shape != q.shape:
        raise ShapeMismatch("prediction and target shapes differ")
    if p.shape[1] < 2:
        raise TooShort("inter-frame loss needs at least two frames")
    n, t = p.shape[:2]
    diff = (p_hat - p).reshape(n, t, -1, 2)
    l_d = (diff**2).sum()
    l_in = ((diff[:, 1:] - diff[:, :-1]) ** 2).sum()
    l_q = (q[:, 1:] - q_hat[:, 1:]).abs().sum()
    return {"l_d": l_d, "l_in": l_in, "l_q": l_q, "l_l": l_d + l_in + l_q}


# ---------------------------------------------------------------------------
# data plumbing


class Track(NamedTuple):
    mel: torch.Tensor        # (T, 80)
    frontal: torch.Tensor    # (T, 68, 3) centred frontal landmarks
    quats: torch.Tensor      # (T, 4)
    centroids: torch.Tensor  # (T, 3)
    posed: torch.Tensor      # (T, 68, 3) original landmarks


def make_track(mel, landmarks, template=None) -> Track:
    from .data.corpus import frontalize_sequence
    mel = np.asarray(mel)
    landmarks = np.asarray(landmarks)
    if len(mel) != len(landmarks):
        raise ShapeMismatch(f"{len(mel)} mel frames vs {len(landmarks)} landmark frames")
    frontal, quats, centroids = frontalize_sequence(landmarks, template)
    as_t = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float32)  # noqa: E731
    return Track(as_t(mel), as_t(frontal), as_t(quats), as_t(centroids), as_t(landmarks))


def batch_tracks(tracks: list[Track], base_idx: list[int]):
    """Stack equal-length tracks and pick the base frame per track."""
    if len({len(t.mel) for t in tracks}) != 1:
        raise ShapeMismatch("tracks in a batch must share a length")
    mel = torch.stack([t.mel for t in tracks])
    frontal = torch.stack([t.frontal for t in tracks])
    quats = torch.stack([t.quats for t in tracks])
    posed = torch.stack([t.posed for t in tracks])
    rows = torch.arange(len(tracks))
    idx = torch.as_tensor(base_idx)
    base_centroid = torch.stack([t.centroids for t in tracks])[rows, idx]
    return {
        "mel": mel,
        "target_xy": frontal[..., :2].reshape(len(tracks), -1, 136),
        "target_q": quats,
        "posed": posed,
        "base_frontal": frontal[rows, idx],
        "base_q": quats[rows, idx],
        "base_centroid": base_centroid,
        "centroids": torch.stack([t.centroids for t in tracks]),
    }


def training_step(model: LandmarkGenerator, batch: dict) -> dict:
    out = model(batch["mel"], batch["base_frontal"], batch["base_q"])
    return landmark_losses(out.frontal, out.quats, batch["target_xy"], batch["target_q"])


def cosine_lr(lr: float, final_fraction: float, step: int, total: int) -> float:
    frac = final_fraction + (1 - final_fraction) * 0.5 * (1 + np.cos(np.pi * step / max(total, 1)))
    return float(lr * frac)


def train_landmarks(model: LandmarkGenerator, tracks: list[Track], steps: int, seed: int = 0,
                    batch: int | None = None,
                    optimizer: torch.optim.Optimizer | None = None, start_step: int = 0,
                    on_step=None) -> list[float]:
    """Adam with cosine decay and a uniformly random base frame per track per step.

    Every track is used each step unless ``batch`` asks for a random subset.

    The base-frame RNG is re-derived from ``(seed, step)`` so a resumed run
    reproduces the same sequence of base frames.
    """
    opt = optimizer or torch.optim.Adam(model.parameters(), lr=model.cfg.lr)
    history = []
    model.train()
    for step in range(start_step, steps):
        for group in opt.param_groups:
            group["lr"] = cosine_lr(model.cfg.lr, model.cfg.lr_final, step, steps)
        gen = np.random.default_rng([seed, step])
        chosen = tracks
        if batch is not None and batch < len(tracks):
            chosen = [tracks[i] for i in gen.choice(len(tracks), size=batch, replace=False)]
        base = [int(gen.integers(len(t.mel))) for t in chosen]
        losses = training_step(model, batch_tracks(chosen, base))
        opt.zero_grad()
        losses["l_l"].backward()
        opt.step()
        history.append(float(losses["l_l"].detach()))
        if on_step is not None:
            on_step(step, {k: float(v.detach()) for k, v in losses.items()})
    return history


@torch.no_grad()
def evaluate_tracks(model: LandmarkGenerator, tracks: list[Track], base_idx: list[int] | None = None) -> dict:
    """Losses and posed predictions with a fixed base frame (default frame 0)."""
    model.eval()
    base_idx = base_idx or [0] * len(tracks)
    batch = batch_tracks(tracks, base_idx)
    out = model(batch["mel"], batch["base_frontal"], batch["base_q"], batch["base_centroid"])
    losses = landmark_losses(out.frontal, out.quats, batch["target_xy"], batch["target_q"])
    return {"losses": {k: float(v) for k, v in losses.items()}, "pred": out, "batch": batch}


@torch.no_grad()
def generate(model: LandmarkGenerator, mel, image_landmarks, template=None) -> tuple[np.ndarray, np.ndarray]:
    """Landmark sequence driven by ``mel`` for the face whose 3-D landmarks are given.

    Returns posed landmarks (T, 68, 3) and quaternions (T, 4), one per mel frame.
    """
    template = geo.load_frontal_template() if template is None else template
    reg = geo.register_to_template(geo.check_landmarks(np.asarray(image_landmarks, dtype=np.float64)), template)
    model.eval()
    as_t = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float32)[None]  # noqa: E731
    out = model(as_t(mel), as_t(reg.frontal), as_t(reg.quat), as_t(reg.centroid))
    return out.points[0].double().numpy(), out.quats[0].double().numpy()
