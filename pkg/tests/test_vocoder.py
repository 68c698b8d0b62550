import numpy as np
import pytest

from talkinghead.data import audio
from talkinghead.errors import BadShape
from talkinghead.tts.vocoder import griffin_lim, log_mel_to_linear, mel_to_linear

CFG = audio.DEFAULT_STFT


def test_error_non_increasing_on_random_spectrograms():
    for seed in range(10):
        mag = np.random.default_rng(seed).random((30, CFG.n_freq))
        _, errors = griffin_lim(mag, n_iters=60, seed=seed, return_errors=True)
        assert len(errors) == 61
        assert np.all(np.diff(errors) <= 1e-6)
        assert errors[-1] < errors[0]


def test_tone_recovers_dominant_bin():
    t = np.arange(16000) / CFG.sample_rate
    tone = np.sin(2 * np.pi * 440.0 * t)
    mag = np.abs(audio.stft(tone))
    expected_bin = round(440.0 * CFG.n_fft / CFG.sample_rate)
    assert expected_bin == 28
    wav = griffin_lim(mag, n_iters=30, seed=1)
    rec = np.abs(audio.stft(wav))
    assert int(np.argmax(rec.mean(axis=0))) == expected_bin
    # nearly every frame agrees on its own
    assert np.mean(np.argmax(rec, axis=1) == expected_bin) > 0.8


def test_zero_iterations_is_worse_than_thirty():
    mag = np.abs(audio.stft(np.random.default_rng(2).normal(size=8000)))
    w0 = griffin_lim(mag, n_iters=0, seed=3)
    w30 = griffin_lim(mag, n_iters=30, seed=3)
    assert audio.spectral_error(w0, mag) > audio.spectral_error(w30, mag)


def test_zero_magnitude_gives_silence():
    wav = griffin_lim(np.zeros((10, CFG.n_freq)), n_iters=5, seed=0)
    assert len(wav) == CFG.n_samples(10)
    assert np.all(wav == 0)


def test_deterministic_per_seed():
    mag = np.random.default_rng(4).random((12, CFG.n_freq))
    assert np.array_equal(griffin_lim(mag, 5, seed=7), griffin_lim(mag, 5, seed=7))


def test_bad_shape():
    with pytest.raises(BadShape):
        griffin_lim(np.zeros((10, 100)))
    with pytest.raises(BadShape):
        griffin_lim(-np.ones((10, CFG.n_freq)))


def smooth_spectrum(rng, frames=6):
    freqs = np.linspace(0, CFG.sample_rate / 2, CFG.n_freq)
    env = np.full_like(freqs, 0.01)
    for _ in range(4):
        env += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((freqs - rng.uniform(0, 8000)) / rng.uniform(300, 1500)) ** 2)
    return np.tile(env, (frames, 1)) * rng.uniform(0.5, 1.5, size=(frames, 1))


def test_mel_round_trip_error():
    fb = audio.mel_filterbank(CFG)
    for seed in range(20):
        mag = smooth_spectrum(np.random.default_rng(seed))
        rec = mel_to_linear(mag @ fb.T)
        assert rec.shape[1] == CFG.n_fft // 2 + 1
        assert np.linalg.norm(rec - mag) / np.linalg.norm(mag) < 0.35


def test_mel_to_linear_zero_and_nonneg():
    assert np.all(mel_to_linear(np.zeros((3, 80))) == 0)
    rec = mel_to_linear(np.random.default_rng(5).random((4, 80)))
    assert rec.shape == (4, 513) and np.all(rec >= 0)


def test_log_mel_bridge_on_speech_like_audio():
    rng = np.random.default_rng(6)
    t = np.arange(12000) / CFG.sample_rate
    wav = sum(np.sin(2 * np.pi * 150 * k * t) / k for k in range(1, 20)) * 0.1 + rng.normal(scale=0.01, size=t.size)
    log_mel = audio.compute_mel(wav)
    mag = log_mel_to_linear(log_mel)
    rebuilt = audio.compute_mel(griffin_lim(mag, 30, seed=0))
    assert rebuilt.shape == log_mel.shape
    assert np.mean(np.abs(rebuilt - log_mel)) < 0.5
