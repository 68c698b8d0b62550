"""STFT analysis/synthesis and log-mel features.

Frames are taken without centre padding, so a signal of ``n`` samples yields
``floor((n - win) / hop) + 1`` frames. The inverse STFT is the least-squares
overlap-add estimate, which makes Griffin-Lim's projection exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import BadShape, TooShort


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    win_ms: float = 50.0
    hop_ms: float = 12.5
    n_fft: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-3

    def __post_init__(self):
        win = self.win_ms * self.sample_rate / 1000.0
        hop = self.hop_ms * self.sample_rate / 1000.0
        if win != int(win) or hop != int(hop):
            raise ValueError("window and hop must be whole numbers of samples")
        if int(win) % int(hop):
            raise ValueError("hop must divide the window evenly")
        if self.n_fft < win:
            raise ValueError("n_fft must be at least the window length")

    @property
    def win_length(self) -> int:
        return int(self.win_ms * self.sample_rate / 1000)

    @property
    def hop_length(self) -> int:
        return int(self.hop_ms * self.sample_rate / 1000)

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def frame_rate(self) -> float:
        return 1000.0 / self.hop_ms

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            return 0
        return (n_samples - self.win_length) // self.hop_length + 1

    def n_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop_length + self.win_length


DEFAULT_STFT = StftConfig()


def hann(length: int) -> np.ndarray:
    """Periodic Hann window."""
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / length)


def stft(wav, cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Complex one-sided STFT, shape (frames, n_fft // 2 + 1)."""
    wav = np.asarray(wav, dtype=np.float64)
    if wav.ndim != 1:
        raise BadShape(f"waveform must be 1-D, got {wav.shape}")
    if len(wav) < cfg.win_length:
        raise TooShort(f"{len(wav)} samples is shorter than one {cfg.win_length}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(wav, cfg.win_length)[:: cfg.hop_length]
    return np.fft.rfft(frames * hann(cfg.win_length), n=cfg.n_fft, axis=1)


def istft(spec, cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Least-squares inverse of :func:`stft` for a possibly inconsistent spectrogram."""
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != cfg.n_freq:
        raise BadShape(f"expected (frames, {cfg.n_freq}) spectrogram, got {spec.shape}")
    n_frames = spec.shape[0]
    win = hann(cfg.win_length)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1)[:, : cfg.win_length] * win
    out = np.zeros(cfg.n_samples(n_frames))
    norm = np.zeros_like(out)
    hop = cfg.hop_length
    for m in range(n_frames):
        out[m * hop : m * hop + cfg.win_length] += frames[m]
        norm[m * hop : m * hop + cfg.win_length] += win**2
    covered = norm > 1e-10
    out[covered] /= norm[covered]
    out[~covered] = 0.0
    return out


def spectral_error(wav, mag, cfg: StftConfig = DEFAULT_STFT) -> float:
    """Frobenius distance between ``|STFT(wav)|`` and ``mag`` over the full two-sided spectrum.

    Interior bins are counted twice (positive and negative frequency), which is
    the norm under which the least-squares inverse is an orthogonal projection.
    """
    diff = np.abs(stft(wav, cfg)) - mag
    weights = np.full(cfg.n_freq, 2.0)
    weights[0] = 1.0
    if cfg.n_fft % 2 == 0:
        weights[-1] = 1.0
    return float(np.sqrt(np.sum(weights * diff**2)))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _filterbank(sample_rate, n_fft, n_mels, fmin, fmax):
    fmax = sample_rate / 2 if fmax is None else fmax
    freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None] - lower) / (centre - lower)
    down = (upper - freqs[None]) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Triangular HTK-scale filters with unit peak, shape (n_mels, n_fft // 2 + 1)."""
    return _filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)


def mel_centres(cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    fmax = cfg.sample_rate / 2 if cfg.fmax is None else cfg.fmax
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))[1:-1]


def compute_mel(wav, cfg: StftConfig = DEFAULT_STFT, filterbank=None) -> np.ndarray:
    """Log-magnitude mel spectrogram, shape (frames, n_mels), float32."""
    fb = mel_filterbank(cfg) if filterbank is None else np.asarray(filterbank)
    mag = np.abs(stft(wav, cfg))
    mel = mag @ fb.T
    return np.log(np.maximum(mel, cfg.log_floor)).astype(np.float32)


def frame_rms(wav, cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """RMS amplitude per analysis frame, aligned with :func:`compute_mel` frames."""
    wav = np.asarray(wav, dtype=np.float64)
    frames = np.lib.stride_tricks.sliding_window_view(wav, cfg.win_length)[:: cfg.hop_length]
    return np.sqrt(np.mean(frames**2, axis=1))
