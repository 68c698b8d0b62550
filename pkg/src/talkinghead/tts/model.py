"""Speaker-conditioned Tacotron-style text-to-mel model.

Text ids -> embedding -> pre-net -> CBHG encoder -> speaker fusion ->
GMM-attention autoregressive decoder (``r`` frames per step) -> post-net.
The speaker slot takes any unit-norm 1024-d vector, so teacher speech
embeddings (training) and face embeddings (inference) are interchangeable.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import BadShape, NoStopWarning

EMBED_DIM = 1024


@dataclass
class TtsConfig:
    n_symbols: int = 19
    n_mels: int = 80
    speaker_dim: int = EMBED_DIM
    embed: int = 32
    prenet: int = 64
    bank_k: int = 4
    bank_channels: int = 32
    highway_layers: int = 2
    gru: int = 32               # per direction, so D = 2 * gru
    speaker_proj: int = 32
    attn_components: int = 5
    attn_hidden: int = 64
    attn_min_sigma: float = 0.01
    rnn: int = 64
    reduction: int = 2
    postnet_channels: int = 64
    postnet_layers: int = 3
    dropout: float = 0.5
    stop_threshold: float = 0.5
    stop_pad: int = 3
    mel_floor: float = math.log(1e-3)

    @property
    def d_model(self) -> int:
        return 2 * self.gru

    def to_dict(self) -> dict:
        return asdict(self)


def lengths_to_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None] < lengths[:, None]


class Prenet(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)
        self.dropout = dropout

    def forward(self, x):
        x = F.dropout(F.relu(self.fc1(x)), self.dropout, self.training)
        return F.dropout(F.relu(self.fc2(x)), self.dropout, self.training)


class BatchNormConv(nn.Module):
    """Conv1d with 'same' padding (also for even kernels) + batch norm."""

    def __init__(self, c_in: int, c_out: int, kernel: int, activation=None):
        super().__init__()
        self.pad = ((kernel - 1) // 2, kernel // 2)
        self.conv = nn.Conv1d(c_in, c_out, kernel, bias=False)
        self.bn = nn.BatchNorm1d(c_out)
        self.activation = activation

    def forward(self, x):
        x = self.bn(self.conv(F.pad(x, self.pad)))
        return self.activation(x) if self.activation is not None else x


class Highway(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.h = nn.Linear(dim, dim)
        self.t = nn.Linear(dim, dim)
        nn.init.constant_(self.t.bias, -1.0)

    def forward(self, x):
        gate = torch.sigmoid(self.t(x))
        return gate * F.relu(self.h(x)) + (1 - gate) * x


class CBHG(nn.Module):
    """Conv bank + max-pool + projections + highway + bidirectional GRU."""

    def __init__(self, dim: int, k: int, channels: int, highway_layers: int, gru: int):
        super().__init__()
        self.bank = nn.ModuleList([BatchNormConv(dim, channels, i, F.relu) for i in range(1, k + 1)])
        self.proj1 = BatchNormConv(k * channels, 2 * channels, 3, F.relu)
        self.proj2 = BatchNormConv(2 * channels, dim, 3)
        self.highways = nn.ModuleList([Highway(dim) for _ in range(highway_layers)])
        self.gru = nn.GRU(dim, gru, batch_first=True, bidirectional=True)

    def forward(self, x, lengths):
        # x: (B, L, dim)
        y = x.transpose(1, 2)
        y = torch.cat([conv(y) for conv in self.bank], dim=1)
        y = F.max_pool1d(F.pad(y, (0, 1), mode="replicate"), 2, stride=1)
        y = self.proj2(self.proj1(y)).transpose(1, 2) + x
        for layer in self.highways:
            y = layer(y)
        packed = nn.utils.rnn.pack_padded_sequence(y, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.gru(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out


class TextEncoder(nn.Module):
    def __init__(self, cfg: TtsConfig):
        super().__init__()
        self.embedding = nn.Embedding(cfg.n_symbols, cfg.embed)
        self.prenet = Prenet(cfg.embed, cfg.prenet, cfg.embed, cfg.dropout)
        self.cbhg = CBHG(cfg.embed, cfg.bank_k, cfg.bank_channels, cfg.highway_layers, cfg.gru)

    def forward(self, ids, lengths):
        return self.cbhg(self.prenet(self.embedding(ids)), lengths)


class SpeakerFusion(nn.Module):
    """Project the speaker vector, concatenate it at every timestep, fuse back to width D."""

    def __init__(self, d_model: int, speaker_dim: int, proj: int):
        super().__init__()
        self.proj = nn.Linear(speaker_dim, proj)
        self.fuse = nn.Linear(d_model + proj, d_model)

    def forward(self, enc, spk):
        s = torch.tanh(self.proj(spk))[:, None].expand(-1, enc.shape[1], -1)
        return self.fuse(torch.cat([enc, s], dim=-1))


class AttentionState(NamedTuple):
    means: torch.Tensor      # (B, K)
    weights: torch.Tensor    # (B, L)


class GMMAttention(nn.Module):
    """Gaussian-mixture location attention with softplus (monotone) mean increments."""

    def __init__(self, query_dim: int, hidden: int, components: int, min_sigma: float = 0.01):
        super().__init__()
        self.k = components
        self.min_sigma = min_sigma
        self.mlp = nn.Sequential(nn.Linear(query_dim, hidden), nn.Tanh(), nn.Linear(hidden, 3 * components))
        # all components start together, moving ~0.2 symbols per step with unit width
        with torch.no_grad():
            self.mlp[-1].weight[components:].zero_()
            bias = self.mlp[-1].bias
            bias[components:2 * components] = math.log(math.expm1(0.2))
            bias[2 * components:] = math.log(math.expm1(1.0))

    def initial_state(self, batch: int, length: int, like: torch.Tensor) -> AttentionState:
        weights = torch.zeros(batch, length, dtype=like.dtype, device=like.device)
        weights[:, 0] = 1.0
        return AttentionState(torch.zeros(batch, self.k, dtype=like.dtype, device=like.device), weights)

    def forward(self, query, state: AttentionState, mask):
        w_hat, delta_hat, sigma_hat = self.mlp(query).chunk(3, dim=-1)
        log_mix = F.log_softmax(w_hat, dim=-1)
        means = state.means + F.softplus(delta_hat)
        sigma = F.softplus(sigma_hat) + self.min_sigma
        pos = torch.arange(mask.shape[1], dtype=query.dtype, device=query.device)
        z = (pos[None, None] - means[..., None]) / sigma[..., None]            # (B, K, L)
        log_comp = log_mix[..., None] - 0.5 * z**2 - torch.log(sigma)[..., None]
        scores = torch.logsumexp(log_comp, dim=1).masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        return weights, AttentionState(means, weights)


class Decoder(nn.Module):
    def __init__(self, cfg: TtsConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.prenet = Prenet(cfg.n_mels, cfg.prenet, cfg.prenet // 2, cfg.dropout)
        self.attention_rnn = nn.LSTMCell(cfg.prenet // 2 + d, cfg.rnn)
        self.attention = GMMAttention(cfg.rnn, cfg.attn_hidden, cfg.attn_components, cfg.attn_min_sigma)
        self.decoder_rnn = nn.LSTMCell(cfg.rnn + d, cfg.rnn)
        self.mel_proj = nn.Linear(cfg.rnn + d, cfg.n_mels * cfg.reduction)
        self.stop_proj = nn.Linear(cfg.rnn + d, cfg.reduction)
        nn.init.constant_(self.mel_proj.bias, cfg.mel_floor / 2)

    def init_state(self, memory):
        b, length, d = memory.shape
        z = memory.new_zeros(b, self.cfg.rnn)
        return {
            "att": (z, z.clone()),
            "dec": (z.clone(), z.clone()),
            "context": memory.new_zeros(b, d),
            "attn": self.attention.initial_state(b, length, memory),
        }

    def step(self, prev_frame, state, memory, mask):
        """One decoder step: returns (r mel frames (B, r, n_mels), stop logits (B, r), alignment, state)."""
        x = torch.cat([self.prenet(prev_frame), state["context"]], dim=-1)
        h_att, c_att = self.attention_rnn(x, state["att"])
        weights, attn = self.attention(h_att, state["attn"], mask)
        context = torch.bmm(weights[:, None], memory)[:, 0]
        h_dec, c_dec = self.decoder_rnn(torch.cat([h_att, context], dim=-1), state["dec"])
        out = torch.cat([h_dec, context], dim=-1)
        frames = self.mel_proj(out).view(-1, self.cfg.reduction, self.cfg.n_mels)
        new_state = {"att": (h_att, c_att), "dec": (h_dec, c_dec), "context": context, "attn": attn}
        return frames, self.stop_proj(out), weights, new_state, attn.means


class Postnet(nn.Module):
    def __init__(self, n_mels: int, channels: int, layers: int, dropout: float):
        super().__init__()
        dims = [n_mels] + [channels] * (layers - 1)
        self.convs = nn.ModuleList([BatchNormConv(a, b, 5, torch.tanh) for a, b in zip(dims[:-1], dims[1:])])
        self.out = nn.Conv1d(channels, n_mels, 5, padding=2)
        self.dropout = dropout

    def forward(self, mel):
        y = mel.transpose(1, 2)
        for conv in self.convs:
            y = F.dropout(conv(y), self.dropout, self.training)
        return mel + self.out(y).transpose(1, 2)


class TtsOutput(NamedTuple):
    mel_pre: torch.Tensor      # (B, T, n_mels)
    mel_post: torch.Tensor
    stop_logits: torch.Tensor  # (B, T)
    alignments: torch.Tensor   # (B, steps, L)
    means: torch.Tensor        # (B, steps, K)


class SynthesisResult(NamedTuple):
    mel: torch.Tensor          # (T, n_mels) log-mel after post-net
    stop_step: int             # frames emitted
    stopped: bool              # False when max_frames was reached without a stop token
    alignments: torch.Tensor   # (steps, L)


class Tacotron(nn.Module):
    def __init__(self, cfg: TtsConfig | None = None):
        super().__init__()
        self.cfg = cfg or TtsConfig()
        self.encoder = TextEncoder(self.cfg)
        self.speaker = SpeakerFusion(self.cfg.d_model, self.cfg.speaker_dim, self.cfg.speaker_proj)
        self.decoder = Decoder(self.cfg)
        self.postnet = Postnet(self.cfg.n_mels, self.cfg.postnet_channels, self.cfg.postnet_layers, self.cfg.dropout)

    def encode_text(self, ids, lengths):
        return self.encoder(ids, lengths)

    def encode(self, ids, lengths, spk):
        return self.speaker(self.encode_text(ids, lengths), spk)

    def forward(self, ids, lengths, spk, mel_targets) -> TtsOutput:
        """Teacher-forced pass. ``mel_targets`` length must be a multiple of the reduction factor."""
        r = self.cfg.reduction
        if mel_targets.shape[1] % r:
            raise BadShape(f"target length {mel_targets.shape[1]} is not a multiple of r={r}")
        memory = self.encode(ids, lengths, spk)
        mask = lengths_to_mask(lengths, ids.shape[1])
        state = self.decoder.init_state(memory)
        prev = mel_targets.new_zeros(mel_targets.shape[0], self.cfg.n_mels)
        frames, stops, aligns, means = [], [], [], []
        for t in range(mel_targets.shape[1] // r):
            out, stop, w, state, mu = self.decoder.step(prev, state, memory, mask)
            frames.append(out)
            stops.append(stop)
            aligns.append(w)
            means.append(mu)
            prev = mel_targets[:, (t + 1) * r - 1]
        mel_pre = torch.cat(frames, dim=1)
        return TtsOutput(mel_pre, self.postnet(mel_pre), torch.cat(stops, dim=1),
                         torch.stack(aligns, dim=1), torch.stack(means, dim=1))

    @torch.no_grad()
    def synthesize(self, ids, spk, max_frames: int = 1000) -> SynthesisResult:
        """Free-running synthesis of one utterance.

        Halts after the first frame whose stop probability exceeds the
        threshold, or at ``max_frames`` (emitting a :class:`NoStopWarning`).
        """
        if max_frames < 1:
            raise ValueError("max_frames must be positive")
        ids = torch.as_tensor(ids, dtype=torch.long).view(1, -1)
        spk = torch.as_tensor(spk, dtype=next(self.parameters()).dtype).view(1, -1)
        lengths = torch.tensor([ids.shape[1]])
        memory = self.encode(ids, lengths, spk)
        mask = lengths_to_mask(lengths)
        state = self.decoder.init_state(memory)
        prev = memory.new_zeros(1, self.cfg.n_mels)
        frames, aligns = [], []
        n_out, stopped = 0, False
        while n_out < max_frames and not stopped:
            out, stop, w, state, _ = self.decoder.step(prev, state, memory, mask)
            aligns.append(w[0])
            probs = torch.sigmoid(stop[0])
            keep = self.cfg.reduction
            over = torch.nonzero(probs > self.cfg.stop_threshold)
            if len(over):
                keep = int(over[0]) + 1
                stopped = True
            frames.append(out[0, :keep])
            n_out += keep
            prev = out[:, -1]
        mel_pre = torch.cat(frames, dim=0)[:max_frames]
        mel = self.postnet(mel_pre[None])[0]
        if not stopped:
            warnings.warn(f"no stop token within {max_frames} frames", NoStopWarning, stacklevel=2)
        return SynthesisResult(mel, mel.shape[0], stopped, torch.stack(aligns))


def pad_targets(mels: list[torch.Tensor], cfg: TtsConfig):
    """Batch mel targets with floor padding and stop targets.

    Each utterance gets ``stop_pad`` floor frames appended; the last real frame
    and the padding are stop-positive. The batch is padded to a multiple of
    the reduction factor. Returns (targets, stop_targets, frame_mask).
    """
    lengths = [m.shape[0] + cfg.stop_pad for m in mels]
    total = max(lengths)
    total += (-total) % cfg.reduction
    b = len(mels)
    targets = mels[0].new_full((b, total, cfg.n_mels), cfg.mel_floor)
    stop = mels[0].new_zeros(b, total)
    mask = torch.zeros(b, total, dtype=torch.bool)
    for i, m in enumerate(mels):
        targets[i, : m.shape[0]] = m
        stop[i, m.shape[0] - 1:] = 1.0
        mask[i, : lengths[i]] = True
    return targets, stop, mask


def tts_loss(out: TtsOutput, targets, stop_targets, frame_mask) -> dict:
    """L1 on pre- and post-net mel plus stop-token BCE, all weight 1."""
    m = frame_mask[..., None].to(targets.dtype)
    denom = m.sum() * targets.shape[-1]
    pre = (torch.abs(out.mel_pre - targets) * m).sum() / denom
    post = (torch.abs(out.mel_post - targets) * m).sum() / denom
    fm = frame_mask.to(targets.dtype)
    stop = (F.binary_cross_entropy_with_logits(out.stop_logits, stop_targets, reduction="none") * fm).sum() / fm.sum()
    return {"loss": pre + post + stop, "mel_pre": pre, "mel_post": post, "stop": stop}


def attention_is_monotone(alignments) -> bool:
    path = torch.as_tensor(alignments).argmax(dim=-1)
    return bool(torch.all(path[1:] >= path[:-1]))


def collate_text(sequences: list[list[int]], pad_id: int = 0):
    lengths = torch.tensor([len(s) for s in sequences])
    ids = torch.full((len(sequences), int(lengths.max())), pad_id, dtype=torch.long)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = torch.as_tensor(s)
    return ids, lengths


def mel_mse(model: Tacotron, ids, spk, mel) -> tuple[float, torch.Tensor]:
    """Teacher-forced post-net MSE of one utterance, in eval mode; also returns its alignment."""
    model.eval()
    mel = torch.as_tensor(mel, dtype=torch.float32)
    targets, _, _ = pad_targets([mel], model.cfg)
    ids, lengths = collate_text([list(ids)])
    spk = torch.as_tensor(spk, dtype=torch.float32).view(1, -1)
    with torch.no_grad():
        out = model(ids, lengths, spk, targets)
    n = mel.shape[0]
    return float(((out.mel_post[0, :n] - mel) ** 2).mean()), out.alignments[0]


def train_tts(model: Tacotron, sequences, mels, speakers, steps: int, lr: float = 2e-3, seed: int = 0,
              batch: int = 8, optimizer=None, start_step: int = 0, on_step=None, clip_norm: float = 1.0):
    """Teacher-forced Adam training.

    Mini-batches are drawn from ``np.random.default_rng([seed, step])`` so a
    resumed run sees the same batches as an uninterrupted one.
    """
    import numpy as np

    opt = optimizer or torch.optim.Adam(model.parameters(), lr=lr)
    mels = [torch.as_tensor(m, dtype=torch.float32) for m in mels]
    speakers = torch.as_tensor(np.stack([np.asarray(s) for s in speakers]), dtype=torch.float32)
    history = []
    for step in range(start_step, steps):
        model.train()
        torch.manual_seed(seed * 1_000_003 + step)    # dropout masks
        gen = np.random.default_rng([seed, step])
        pick = gen.permutation(len(mels))[:batch] if len(mels) > batch else np.arange(len(mels))
        ids, lengths = collate_text([sequences[i] for i in pick])
        targets, stop, mask = pad_targets([mels[i] for i in pick], model.cfg)
        out = model(ids, lengths, speakers[pick], targets)
        losses = tts_loss(out, targets, stop, mask)
        opt.zero_grad()
        losses["loss"].backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
        opt.step()
        history.append(float(losses["loss"].detach()))
        if on_step is not None:
            on_step(step, {k: float(v.detach()) for k, v in losses.items()})
    return opt, history
