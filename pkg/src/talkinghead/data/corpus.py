"""Corpus utilities: frame-rate alignment, fixed windows, splits and disk layout.

Disk layout::

    corpus/
      manifest.json            corpus-level metadata and clip table
      pairs.jsonl              one identity per line: {"id", "faces", "mels"}
      id_000/
        identity.json          face shape, rest pose, appearance, voice
        face.png               neutral reference photo (256 x 256)
        face_landmarks.json    3D landmarks of face.png
        clip_000.wav / .mel / .landmarks.json / .face.png
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .. import geometry as geo
from ..errors import CorpusNotFound, TooShort
from ..io import (atomic_write_bytes, read_json, read_mel, read_png, read_wav, write_json,
                  write_mel, write_png, write_wav)
from .audio import DEFAULT_STFT, StftConfig
from .synth import Identity, SyntheticClip, render_face

CORPUS_VERSION = 1


def upsample_landmarks(points, quats, src_fps: float = 25.0, dst_fps: float = 80.0):
    """Resample a landmark track to ``dst_fps``.

    Points are linearly interpolated, quaternions spherically interpolated and
    renormalised. Output length is ``round(len * dst_fps / src_fps)``.
    """
    points = np.asarray(points, dtype=np.float64)
    quats = np.asarray(quats, dtype=np.float64)
    n = len(points)
    if n < 2:
        raise TooShort("need at least two frames to interpolate")
    m = int(round(n * dst_fps / src_fps))
    pos = np.minimum(np.arange(m) * src_fps / dst_fps, n - 1)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - lo
    out_pts = (1 - frac)[:, None, None] * points[lo] + frac[:, None, None] * points[lo + 1]
    out_q = np.stack([geo.quat_normalize(geo.slerp(quats[i], quats[i + 1], f)) for i, f in zip(lo, frac)])
    return out_pts, out_q


def slice_fixed_windows(clip: SyntheticClip, seconds: float = 3.0,
                        cfg: StftConfig = DEFAULT_STFT) -> list[SyntheticClip]:
    """Non-overlapping windows of ``seconds``; a shorter tail is dropped."""
    win_samples = int(round(seconds * cfg.sample_rate))
    if win_samples % cfg.hop_length:
        raise ValueError("window length must be a whole number of hops")
    if len(clip.waveform) < win_samples:
        raise TooShort(f"clip is {clip.duration:.3f} s, shorter than {seconds} s")
    hop_frames = win_samples // cfg.hop_length
    n_frames = cfg.n_frames(win_samples)
    out = []
    for w in range(len(clip.waveform) // win_samples):
        f0 = w * hop_frames
        out.append(dataclasses.replace(
            clip,
            waveform=clip.waveform[w * win_samples:(w + 1) * win_samples],
            mel=clip.mel[f0:f0 + n_frames],
            landmarks=clip.landmarks[f0:f0 + n_frames],
            quats=clip.quats[f0:f0 + n_frames],
        ))
    return out


def split_corpus(clips: list, seed: int, fractions=(0.9, 0.05, 0.05)):
    """Seeded clip-level train/validation/test split."""
    n = len(clips)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_val - n_test
    pick = lambda idx: [clips[i] for i in sorted(idx)]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


def frontalize_sequence(landmarks, template=None):
    """Register every frame; returns (frontal (T, 68, 3), quats (T, 4), centroids (T, 3))."""
    template = geo.load_frontal_template() if template is None else template
    regs = [geo.register_to_template(f, template) for f in landmarks]
    return (np.stack([r.frontal for r in regs]), np.stack([r.quat for r in regs]),
            np.stack([r.centroid for r in regs]))


# ---------------------------------------------------------------------------
# disk


def _clip_stem(clip: SyntheticClip) -> str:
    return f"id_{clip.identity.index:03d}/clip_{clip.index:03d}"


def write_sequence_json(path, points, quats, fps: float, **header) -> None:
    frames = [geo.frame_to_json(p, q) for p, q in zip(points, quats)]
    write_json(path, {"fps": fps, **header, "frames": frames})


def read_sequence_json(path):
    obj = read_json(path)
    pts = np.array([f["points"] for f in obj["frames"]], dtype=np.float64)
    quats = np.array([f.get("quat", geo.IDENTITY) for f in obj["frames"]], dtype=np.float64)
    header = {k: v for k, v in obj.items() if k != "frames"}
    return pts, quats, header


def write_corpus(clips: list[SyntheticClip], out_dir, seed: int, clip_seconds: float,
                 cfg: StftConfig = DEFAULT_STFT) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    identities: dict[int, Identity] = {}
    table = []
    for clip in clips:
        ident = clip.identity
        idir = out / f"id_{ident.index:03d}"
        if ident.index not in identities:
            identities[ident.index] = ident
            write_json(idir / "identity.json", ident.to_dict())
            neutral = ident.neutral_landmarks()
            write_png(idir / "face.png", render_face(ident, neutral))
            write_json(idir / "face_landmarks.json", geo.frame_to_json(neutral, ident.rest_quat))
        stem = _clip_stem(clip)
        write_wav(out / f"{stem}.wav", clip.waveform, cfg.sample_rate)
        write_mel(out / f"{stem}.mel", clip.mel, cfg.hop_ms, cfg.win_ms)
        write_sequence_json(out / f"{stem}.landmarks.json", clip.landmarks, clip.quats,
                            cfg.frame_rate, text=clip.text, seed=str(clip.seed))
        write_png(out / f"{stem}.face.png", clip.face)
        table.append({"identity": ident.index, "clip": clip.index, "stem": stem,
                      "text": clip.text, "seed": str(clip.seed), "frames": clip.n_frames})
    pairs = []
    for idx in sorted(identities):
        mine = [t for t in table if t["identity"] == idx]
        pairs.append({"id": idx, "faces": [f"{t['stem']}.face.png" for t in mine],
                      "mels": [f"{t['stem']}.mel" for t in mine]})
    atomic_write_bytes(out / "pairs.jsonl", "".join(json.dumps(p) + "\n" for p in pairs).encode())
    write_json(out / "manifest.json", {
        "version": CORPUS_VERSION,
        "seed": seed,
        "clip_seconds": clip_seconds,
        "n_identities": len(identities),
        "stft": dataclasses.asdict(cfg),
        "clips": table,
    })
    return out


def load_corpus(corpus_dir) -> list[SyntheticClip]:
    root = Path(corpus_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CorpusNotFound(f"no corpus manifest at {manifest_path}")
    manifest = read_json(manifest_path)
    cfg = StftConfig(**manifest["stft"])
    identities = {}
    clips = []
    for row in manifest["clips"]:
        idx = row["identity"]
        if idx not in identities:
            identities[idx] = Identity.from_dict(read_json(root / f"id_{idx:03d}" / "identity.json"))
        stem = row["stem"]
        wav, _ = read_wav(root / f"{stem}.wav")
        mel, _ = read_mel(root / f"{stem}.mel")
        pts, quats, _ = read_sequence_json(root / f"{stem}.landmarks.json")
        clips.append(SyntheticClip(identities[idx], row["clip"], int(row["seed"]), row["text"], wav,
                                   mel, pts, quats, read_png(root / f"{stem}.face.png"), cfg.sample_rate))
    return clips


def read_pairs_manifest(corpus_dir) -> list[dict]:
    path = Path(corpus_dir) / "pairs.jsonl"
    if not path.exists():
        raise CorpusNotFound(f"no pairs manifest at {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
