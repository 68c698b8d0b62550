"""Mel-to-waveform bridge: filterbank pseudo-inverse followed by Griffin-Lim."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..data.audio import DEFAULT_STFT, StftConfig, istft, mel_filterbank, spectral_error, stft
from ..errors import BadShape


@lru_cache(maxsize=4)
def _pinv(cfg: StftConfig) -> np.ndarray:
    inv = np.linalg.pinv(mel_filterbank(cfg))
    inv.setflags(write=False)
    return inv


def mel_to_linear(mel, cfg: StftConfig = DEFAULT_STFT, filterbank=None) -> np.ndarray:
    """Linear mel magnitudes (T, n_mels) -> STFT magnitudes (T, n_fft // 2 + 1).

    Uses the minimum-norm pseudo-inverse of the filterbank, clipped at zero.
    """
    mel = np.asarray(mel, dtype=np.float64)
    inv = _pinv(cfg) if filterbank is None else np.linalg.pinv(np.asarray(filterbank))
    if mel.ndim != 2 or mel.shape[1] != inv.shape[1]:
        raise BadShape(f"expected (frames, {inv.shape[1]}) mel, got {mel.shape}")
    return np.maximum(mel @ inv.T, 0.0)


def log_mel_to_linear(log_mel, cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Inverse of :func:`compute_mel` up to the filterbank's information loss.

    Bands sitting at the log floor are treated as silent.
    """
    log_mel = np.asarray(log_mel, dtype=np.float64)
    mel = np.exp(log_mel)
    mel[log_mel <= np.log(cfg.log_floor) + 1e-6] = 0.0
    return mel_to_linear(mel, cfg)


def griffin_lim(mag, n_iters: int = 60, seed: int = 0, cfg: StftConfig = DEFAULT_STFT,
                return_errors: bool = False):
    """Reconstruct a waveform whose STFT magnitude approximates ``mag``.

    Starts from uniformly random phase drawn from ``seed``; each iteration
    projects onto consistent spectrograms (least-squares iSTFT) and then onto
    the target magnitude. With ``return_errors`` the magnitude error after
    each projection is returned as well (length ``n_iters + 1``).
    """
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim != 2 or mag.shape[1] != cfg.n_freq:
        raise BadShape(f"expected (frames, {cfg.n_freq}) magnitudes, got {mag.shape}")
    if np.any(mag < 0) or not np.all(np.isfinite(mag)):
        raise BadShape("magnitudes must be finite and nonnegative")
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    wav = istft(mag * phase, cfg)
    errors = [spectral_error(wav, mag, cfg)] if return_errors else None
    for _ in range(n_iters):
        spec = stft(wav, cfg)
        amp = np.abs(spec)
        phase = np.where(amp > 1e-12, spec / np.maximum(amp, 1e-12), 1.0)
        wav = istft(mag * phase, cfg)
        if return_errors:
            errors.append(spectral_error(wav, mag, cfg))
    return (wav, errors) if return_errors else wav
