"""Procedural speakers, speech, landmark tracks and face renders.

Each identity gets a face shape, an appearance palette, a rest head pose and
a pitch band. A clip is random toy-lexicon text rendered by additive
formant synthesis; its lip opening is a linear function of the per-frame RMS
of the rendered waveform, and its head pose follows a smooth sum of slow
sinusoids around the rest pose. Landmark frames are aligned one-to-one with
mel frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .. import geometry as geo
from ..tts.text import Lexicon, load_lexicon, normalize_text
from .audio import DEFAULT_STFT, StftConfig, compute_mel, frame_rms

IMAGE_SIZE = 256
_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *path: int) -> int:
    s = splitmix64(master & _MASK64)
    for p in path:
        s = splitmix64(s ^ (p & _MASK64))
    return s


# ---------------------------------------------------------------------------
# phone inventory

@dataclass(frozen=True)
class Phone:
    frames: int
    voice: float = 0.0
    formants: tuple = (500.0, 1500.0, 2500.0)
    noise: tuple = (0.0, 0.0, 0.0, 0.0)   # amplitudes of the four noise bands
    closure: int = 0                        # leading silent frames (stops)


NOISE_BANDS = (800.0, 2000.0, 4000.0, 5500.0)

PHONES = {
    "a": Phone(10, 1.0, (730, 1090, 2440)),
    "e": Phone(10, 1.0, (530, 1840, 2480)),
    "i": Phone(10, 0.9, (270, 2290, 3010)),
    "o": Phone(10, 1.0, (570, 840, 2410)),
    "u": Phone(10, 0.85, (300, 870, 2240)),
    "m": Phone(7, 0.45, (250, 1100, 2200)),
    "n": Phone(7, 0.45, (250, 1700, 2500)),
    "l": Phone(7, 0.6, (360, 1300, 2700)),
    "b": Phone(6, 0.25, (300, 900, 2200), (0.35, 0, 0, 0), closure=3),
    "d": Phone(6, 0.25, (300, 1700, 2600), (0, 0, 0.35, 0), closure=3),
    "g": Phone(6, 0.25, (300, 1500, 2300), (0, 0.35, 0, 0), closure=3),
    "p": Phone(6, 0.0, (500, 1500, 2500), (0.45, 0, 0, 0), closure=3),
    "t": Phone(6, 0.0, (500, 1500, 2500), (0, 0, 0.45, 0), closure=3),
    "k": Phone(6, 0.0, (500, 1500, 2500), (0, 0.45, 0, 0), closure=3),
    "s": Phone(8, 0.0, (500, 1500, 2500), (0, 0, 0.1, 0.45)),
    "z": Phone(8, 0.3, (300, 1500, 2500), (0, 0, 0.1, 0.35)),
}
SILENCE = Phone(6)
LEAD_FRAMES = 6

VOWELS = "aeiou"
CONSONANTS = "bdgklmnpstz"


# ---------------------------------------------------------------------------
# identities

@dataclass
class Identity:
    index: int
    seed: int
    shape: np.ndarray          # (68, 3) frontal, centered
    rest_quat: np.ndarray
    offset: np.ndarray         # (3,) placement in the face box
    f0: float                  # pitch-band centre in Hz
    formant_scale: float
    lip_gain: float
    appearance: dict = field(default_factory=dict)

    def neutral_landmarks(self) -> np.ndarray:
        return geo.apply_rotation(self.shape, self.rest_quat) + self.offset

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "seed": self.seed,
            "shape": self.shape.tolist(),
            "rest_quat": self.rest_quat.tolist(),
            "offset": self.offset.tolist(),
            "f0": self.f0,
            "formant_scale": self.formant_scale,
            "lip_gain": self.lip_gain,
            "appearance": self.appearance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Identity":
        return cls(
            index=d["index"], seed=d["seed"], shape=np.array(d["shape"]),
            rest_quat=np.array(d["rest_quat"]), offset=np.array(d["offset"]),
            f0=d["f0"], formant_scale=d["formant_scale"], lip_gain=d["lip_gain"],
            appearance={k: tuple(v) for k, v in d["appearance"].items()},
        )


PITCH_BANDS = (100.0, 145.0, 205.0, 290.0, 120.0, 170.0, 240.0, 340.0)


def make_identity(index: int, seed: int) -> Identity:
    rng = np.random.default_rng(seed)
    tpl = geo.load_frontal_template()
    shape = tpl.copy()
    shape[:, 0] *= rng.uniform(0.9, 1.1)
    shape[:, 1] *= rng.uniform(0.9, 1.08)
    lips = list(geo.LIPS)
    shape[lips, 0] *= rng.uniform(0.85, 1.15)
    eyes = list(geo.RIGHT_EYE + geo.LEFT_EYE)
    shape[eyes, 0] += np.sign(shape[eyes, 0]) * rng.uniform(-0.03, 0.03)
    brows = list(geo.RIGHT_BROW + geo.LEFT_BROW)
    shape[brows, 1] += rng.uniform(-0.03, 0.04)
    shape -= shape.mean(axis=0)

    rest = geo.quat_multiply(
        geo.quat_from_axis_angle([0, 1, 0], rng.uniform(-0.2, 0.2)),
        geo.quat_from_axis_angle([1, 0, 0], rng.uniform(-0.1, 0.1)),
    )
    hue = (index * 0.618034 + rng.uniform(0, 0.1)) % 1.0
    appearance = {
        "background": tuple(np.round(_hsv(hue, 0.35, 0.75), 4)),
        "skin": tuple(np.round(_hsv(0.05 + 0.05 * rng.uniform(), rng.uniform(0.25, 0.6), rng.uniform(0.55, 0.95)), 4)),
        "hair": tuple(np.round(_hsv((hue + 0.5) % 1.0, rng.uniform(0.3, 0.8), rng.uniform(0.1, 0.6)), 4)),
        "lips": tuple(np.round(_hsv(0.97, rng.uniform(0.4, 0.7), rng.uniform(0.5, 0.8)), 4)),
        "iris": tuple(np.round(_hsv(rng.uniform(), 0.6, 0.5), 4)),
    }
    return Identity(
        index=index,
        seed=seed,
        shape=shape,
        rest_quat=geo.quat_canonical(rest),
        offset=np.array([rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), 0.0]),
        f0=PITCH_BANDS[index % len(PITCH_BANDS)] * (1.0 + 0.03 * (index // len(PITCH_BANDS))),
        formant_scale=float(0.92 + 0.05 * (index % 4) + rng.uniform(-0.01, 0.01)),
        lip_gain=float(rng.uniform(0.9, 1.1)),
        appearance=appearance,
    )


def _hsv(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


# ---------------------------------------------------------------------------
# speech

def random_text(rng: np.random.Generator, budget_frames: int) -> str:
    words: list[str] = []
    used = 0
    while True:
        n_syl = int(rng.integers(1, 4))
        word = "".join(rng.choice(list(CONSONANTS)) + rng.choice(list(VOWELS)) for _ in range(n_syl))
        cost = sum(PHONES[c].frames for c in word) + (SILENCE.frames if words else 0)
        if used + cost > budget_frames:
            break
        words.append(word)
        used += cost
    if not words:
        words.append(rng.choice(list(CONSONANTS)) + rng.choice(list(VOWELS)))
    return " ".join(words)


def _control_tracks(text: str, lexicon: Lexicon, n_frames: int | None):
    frames = [SILENCE] * LEAD_FRAMES
    seq = []
    for ch in normalize_text(text):
        sym = lexicon.graphemes[ch]
        phone = SILENCE if sym == lexicon.boundary else PHONES[sym]
        seq.append(phone)
    for phone in seq:
        for k in range(phone.frames):
            frames.append(Phone(1, 0.0, phone.formants) if k < phone.closure else phone)
    frames += [SILENCE] * LEAD_FRAMES
    if n_frames is not None:
        if len(frames) > n_frames:
            raise ValueError(f"text needs {len(frames)} frames but only {n_frames} are available")
        frames += [SILENCE] * (n_frames - len(frames))
    voice = np.array([f.voice for f in frames])
    noise = np.array([f.noise for f in frames])
    formants = np.array([f.formants for f in frames], dtype=np.float64)
    return voice, noise, formants


def _smooth(track, width=3):
    kernel = np.hanning(width + 2)[1:-1]
    kernel /= kernel.sum()
    pad = width // 2
    padded = np.pad(track, [(pad, pad)] + [(0, 0)] * (track.ndim - 1), mode="edge")
    return np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="valid"), 0, padded)


def synthesize_speech(text: str, identity: Identity, seed: int, lexicon: Lexicon | None = None,
                      n_frames: int | None = None, cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Render ``text`` as a waveform in the identity's voice.

    With ``n_frames`` the waveform is padded with silence to exactly
    ``cfg.n_samples(n_frames)`` samples.
    """
    lexicon = lexicon or load_lexicon()
    rng = np.random.default_rng(seed)
    voice, noise, formants = _control_tracks(text, lexicon, n_frames)
    voice, noise, formants = _smooth(voice), _smooth(noise), _smooth(formants)
    nf = len(voice)
    n = cfg.n_samples(nf)
    sr = cfg.sample_rate
    t = np.arange(n) / sr
    ctrl_t = (np.arange(nf) * cfg.hop_length + cfg.win_length / 2) / sr

    voice_s = np.interp(t, ctrl_t, voice)
    formants_s = np.stack([np.interp(t, ctrl_t, formants[:, i]) for i in range(3)]) * identity.formant_scale
    phase0 = rng.uniform(0, 2 * np.pi)
    f0 = identity.f0 * (1.0 + 0.05 * np.sin(2 * np.pi * 0.8 * t + phase0)) * (1.0 - 0.04 * t / max(t[-1], 1e-9))
    phase = 2 * np.pi * np.cumsum(f0) / sr

    bandwidths = np.array([90.0, 110.0, 160.0])[:, None]
    gains = np.array([1.0, 0.6, 0.3])[:, None]
    voiced = np.zeros(n)
    n_harm = int(3800 // (identity.f0 * 1.06))
    for h in range(1, n_harm + 1):
        fh = h * f0
        env = np.sum(gains / (1.0 + ((fh[None] - formants_s) / bandwidths) ** 2), axis=0)
        voiced += env * np.sin(h * phase)
    voiced *= voice_s

    noisy = np.zeros(n)
    white = rng.normal(size=n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    for b, centre in enumerate(NOISE_BANDS):
        amp = np.interp(t, ctrl_t, noise[:, b])
        if not amp.any():
            continue
        band = np.fft.irfft(spec * np.exp(-0.5 * ((freqs - centre) / (0.25 * centre)) ** 2), n=n)
        band /= np.sqrt(np.mean(band**2)) + 1e-12
        noisy += amp * band
    wav = 0.12 * voiced + 0.12 * noisy
    return np.clip(wav, -0.99, 0.99)


def text_frames(text: str, lexicon: Lexicon | None = None) -> int:
    lexicon = lexicon or load_lexicon()
    return len(_control_tracks(text, lexicon, None)[0])


# ---------------------------------------------------------------------------
# landmarks

OUTER_UPPER = (49, 50, 51, 52, 53)
OUTER_LOWER = (59, 58, 57, 56, 55)
INNER_UPPER = (61, 62, 63)
INNER_LOWER = (67, 66, 65)
OUTER_WEIGHTS = (0.6, 0.9, 1.0, 0.9, 0.6)
INNER_WEIGHTS = (0.9, 1.0, 0.9)


def apply_mouth_opening(shape: np.ndarray, opening: float) -> np.ndarray:
    """Open the lips by ``opening`` face-box units at the mouth centre.

    Upper and lower lips move symmetrically, so the landmark centroid is unchanged.
    """
    out = shape.copy()
    for up, lo, w in zip(OUTER_UPPER, OUTER_LOWER, OUTER_WEIGHTS):
        out[up, 1] += 0.5 * opening * w
        out[lo, 1] -= 0.5 * opening * w
    for up, lo, w in zip(INNER_UPPER, INNER_LOWER, INNER_WEIGHTS):
        out[up, 1] += 0.5 * opening * w
        out[lo, 1] -= 0.5 * opening * w
    return out


def lip_opening(points: np.ndarray) -> np.ndarray:
    """Measured inner-lip gap at the mouth centre, per frame."""
    pts = np.asarray(points)
    return pts[..., 62, 1] - pts[..., 66, 1]


def opening_from_rms(rms: np.ndarray, gain: float) -> np.ndarray:
    return 0.9 * gain * np.asarray(rms)


def head_pose_path(n_frames: int, rng: np.random.Generator, frame_rate: float = 80.0) -> np.ndarray:
    t = np.arange(n_frames) / frame_rate
    quats = np.empty((n_frames, 4))
    params = []
    for axis, amp in (([0, 1, 0], 0.1), ([1, 0, 0], 0.06), ([0, 0, 1], 0.035)):
        params.append((axis, amp * rng.uniform(0.6, 1.0), rng.uniform(0.12, 0.35), rng.uniform(0, 2 * np.pi)))
    for k in range(n_frames):
        q = geo.IDENTITY
        for axis, amp, freq, ph in params:
            q = geo.quat_multiply(geo.quat_from_axis_angle(axis, amp * np.sin(2 * np.pi * freq * t[k] + ph)), q)
        quats[k] = geo.quat_canonical(q)
    return quats


# ---------------------------------------------------------------------------
# face rendering

def to_pixels(xy, size: int = IMAGE_SIZE) -> np.ndarray:
    """Face-box coordinates to continuous (column, row) pixel positions."""
    xy = np.asarray(xy, dtype=np.float64)
    col = (xy[..., 0] + 1.0) * 0.5 * (size - 1)
    row = (1.0 - xy[..., 1]) * 0.5 * (size - 1)
    return np.stack([col, row], axis=-1)


def _head_outline(identity: Identity, quat) -> tuple[np.ndarray, np.ndarray]:
    jaw = identity.shape[list(geo.JAW)]
    phi = np.linspace(0, np.pi, 15)[1:-1]
    half_w = 0.5 * (jaw[-1, 0] - jaw[0, 0])
    top = jaw[0, 1]
    fore = np.stack([half_w * np.cos(phi), top + 0.82 * np.sin(phi), -0.45 + 0.25 * np.sin(phi)], axis=1)
    phi_h = np.linspace(-0.12, np.pi + 0.12, 17)
    hair = np.stack([1.08 * half_w * np.cos(phi_h), top - 0.05 + 0.97 * np.sin(phi_h), -0.5 + 0.25 * np.sin(phi_h)], axis=1)
    fore = geo.apply_rotation(fore, quat) + identity.offset
    hair = geo.apply_rotation(hair, quat) + identity.offset
    return fore, hair


def render_face(identity: Identity, points: np.ndarray, quat=None, size: int = IMAGE_SIZE) -> np.ndarray:
    """Render a flat-shaded face for posed 3D landmarks; returns 3 x size x size in [0, 1]."""
    quat = identity.rest_quat if quat is None else quat
    app = identity.appearance

    def col(name, scale=1.0):
        return tuple(int(round(255 * min(1.0, c * scale))) for c in app[name])

    img = Image.new("RGB", (size, size), col("background"))
    draw = ImageDraw.Draw(img)
    px = to_pixels(points[:, :2], size)
    fore, hair = _head_outline(identity, quat)
    hair_px = to_pixels(hair[:, :2], size)
    fore_px = to_pixels(fore[:, :2], size)

    def poly(arr):
        return [tuple(p) for p in np.round(arr, 2)]

    draw.polygon(poly(np.concatenate([hair_px, fore_px[::-1]])), fill=col("hair"))
    draw.polygon(poly(np.concatenate([px[list(geo.JAW)], fore_px])), fill=col("skin"))
    for brow in (geo.RIGHT_BROW, geo.LEFT_BROW):
        draw.line(poly(px[list(brow)]), fill=col("hair"), width=4)
    for eye in (geo.RIGHT_EYE, geo.LEFT_EYE):
        draw.polygon(poly(px[list(eye)]), fill=(240, 240, 240))
        c = px[list(eye)].mean(axis=0)
        r = 0.03 * (size - 1) / 2
        draw.ellipse([c[0] - r, c[1] - r, c[0] + r, c[1] + r], fill=col("iris"))
        r /= 2.2
        draw.ellipse([c[0] - r, c[1] - r, c[0] + r, c[1] + r], fill=(15, 15, 15))
    draw.line(poly(px[list(geo.NOSE_BRIDGE)]), fill=col("skin", 0.7), width=2)
    draw.line(poly(px[list(geo.NOSE_BASE)]), fill=col("skin", 0.7), width=2)
    draw.polygon(poly(px[list(geo.OUTER_LIP)]), fill=col("lips"))
    draw.polygon(poly(px[list(geo.INNER_LIP)]), fill=(60, 15, 20))
    return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def jitter_image(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = image * rng.uniform(0.9, 1.1) + rng.normal(scale=0.02, size=image.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# clips

@dataclass
class SyntheticClip:
    identity: Identity
    index: int
    seed: int
    text: str
    waveform: np.ndarray      # float64 samples at cfg.sample_rate
    mel: np.ndarray           # (T, n_mels) float32 log-mel
    landmarks: np.ndarray     # (T, 68, 3) posed landmarks
    quats: np.ndarray         # (T, 4) ground-truth head pose
    face: np.ndarray          # (3, 256, 256) face photo for this clip
    sample_rate: int = DEFAULT_STFT.sample_rate

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]

    @property
    def duration(self) -> float:
        return len(self.waveform) / self.sample_rate


def make_clip(identity: Identity, index: int, seed: int, clip_seconds: float,
              lexicon: Lexicon | None = None, cfg: StftConfig = DEFAULT_STFT,
              text: str | None = None) -> SyntheticClip:
    lexicon = lexicon or load_lexicon()
    rng = np.random.default_rng(seed)
    n_frames = cfg.n_frames(int(round(clip_seconds * cfg.sample_rate)))
    if text is None:
        text = random_text(rng, n_frames - 2 * LEAD_FRAMES)
    wav = synthesize_speech(text, identity, int(rng.integers(2**63)), lexicon, n_frames, cfg)
    mel = compute_mel(wav, cfg)
    opening = opening_from_rms(frame_rms(wav, cfg), identity.lip_gain)
    path = head_pose_path(n_frames, rng, cfg.frame_rate)
    quats = np.array([geo.quat_canonical(geo.quat_multiply(q, identity.rest_quat)) for q in path])
    landmarks = np.stack([
        geo.apply_rotation(apply_mouth_opening(identity.shape, o), q) + identity.offset
        for o, q in zip(opening, quats)
    ])
    k = int(rng.integers(n_frames))
    face = jitter_image(render_face(identity, landmarks[k], quats[k]), rng)
    return SyntheticClip(identity, index, seed, text, wav, mel, landmarks, quats, face, cfg.sample_rate)


def synth_corpus(seed: int, n_identities: int, clips_per_id: int, clip_seconds: float = 3.0,
                 lexicon: Lexicon | None = None, cfg: StftConfig = DEFAULT_STFT) -> list[SyntheticClip]:
    """Deterministic synthetic corpus of ``n_identities * clips_per_id`` clips."""
    if n_identities < 1 or clips_per_id < 1:
        raise ValueError("counts must be >= 1")
    lexicon = lexicon or load_lexicon()
    clips = []
    for i in range(n_identities):
        ident = make_identity(i, derive_seed(seed, i))
        for c in range(clips_per_id):
            clips.append(make_clip(ident, c, derive_seed(seed, i, c + 1), clip_seconds, lexicon, cfg))
    return clips
