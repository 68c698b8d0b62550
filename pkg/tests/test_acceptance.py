"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

The suites reuse the oracle-backed checks from the per-module test files and
add the shape, overfit and end-to-end runs that only make sense here.
"""

import json
import time

import numpy as np
import pytest
import torch

import test_face_voice as t_fv
import test_geometry as t_geo
import test_landmark_gen as t_lg
import test_metrics as t_met
import test_renderer as t_rd
import test_tts as t_tts
import test_vocoder as t_voc
from talkinghead import face_voice as fv
from talkinghead import io, metrics
from talkinghead import landmark_gen as lg
from talkinghead import renderer as rd
from talkinghead.data import synth
from talkinghead.data.corpus import write_corpus
from talkinghead.pipeline.config import STAGES, parse_config
from talkinghead.pipeline.generate import generate
from talkinghead.pipeline.stages import train_stage
from talkinghead.tts import model as tm
from talkinghead.tts.text import load_lexicon, phonemize


def run_checks(checks) -> tuple[list[str], float]:
    failures = []
    t0 = time.perf_counter()
    for check in checks:
        try:
            check()
        except AssertionError as exc:
            failures.append(f"{check.__name__}: {str(exc).splitlines()[0] if str(exc) else 'assertion failed'}")
    return failures, time.perf_counter() - t0


def verdict(record, name, failures, elapsed, budget=None, extra=""):
    ok = not failures and (budget is None or elapsed < budget)
    timing = f"{elapsed:.1f}s" + (f" (budget {budget:.0f}s)" if budget else "")
    detail = "; ".join(failures) if failures else extra
    record(name, ok, f"[{timing}] {detail}".rstrip())
    assert not failures, failures
    if budget is not None:
        assert elapsed < budget, f"{name} took {elapsed:.1f}s, budget {budget}s"


# --- geometry ------------------------------------------------------------------------------


def test_geometry_suite(record_criterion):
    checks = [
        t_geo.test_quat_to_matrix_examples,
        t_geo.test_matrix_is_proper_rotation,
        t_geo.test_sign_equivalence,
        t_geo.test_multiply_matches_matrix_product,
        t_geo.test_apply_rotation_examples,
        t_geo.test_apply_rotation_is_rigid_and_invertible,   # round trip within 1e-8
        t_geo.test_register_identity,
        t_geo.test_register_recovers_known_rotations,       # 100 rotations, 1e-3 rad
        t_geo.test_register_noisy_monte_carlo,              # 100 rotations, sigma 0.01, 5e-2 rad
    ]
    failures, elapsed = run_checks(checks)
    verdict(record_criterion, "geometry suite", failures, elapsed, budget=10,
            extra=f"{len(checks)} checks")


# --- gradients -----------------------------------------------------------------------------


def test_gradient_suite(record_criterion):
    checks = [
        t_fv.test_gradients_match_finite_differences,           # mms_loss, rel < 1e-4
        t_lg.test_loss_gradients_match_finite_differences,      # l_d, l_in, l_q, rel < 1e-4
        t_rd.test_l1_plus_perceptual_gradient_matches_finite_differences,   # rel < 1e-4
        t_tts.test_full_loss_gradient_matches_finite_differences,           # recurrent, rel < 1e-3
    ]
    failures, elapsed = run_checks(checks)
    verdict(record_criterion, "gradient suite", failures, elapsed, budget=60, extra=f"{len(checks)} losses")


# --- oracles -------------------------------------------------------------------------------


def pixel_area(poly, n=600):
    """Even-odd ray casting over an n x n grid of cell centres covering the bounding box."""
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    xs = lo[0] + (np.arange(n) + 0.5) * (hi[0] - lo[0]) / n
    ys = lo[1] + (np.arange(n) + 0.5) * (hi[1] - lo[1]) / n
    gx, gy = np.meshgrid(xs, ys)
    inside = np.zeros_like(gx, dtype=bool)
    for k in range(len(poly)):
        (x0, y0), (x1, y1) = poly[k], poly[(k + 1) % len(poly)]
        straddles = (y0 > gy) != (y1 > gy)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x0 + (gy - y0) * (x1 - x0) / (y1 - y0)
        inside ^= straddles & (gx < x_cross)
    return inside.mean() * (hi[0] - lo[0]) * (hi[1] - lo[1])


def check_shoelace_vs_pixels():
    rng = np.random.default_rng(11)
    lips = np.array(metrics.OUTER_LIP_INDICES)
    for _ in range(25):
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=len(lips)))
        radii = rng.uniform(0.5, 1.0, size=len(lips))
        poly = np.stack([0.2 * radii * np.cos(angles), 0.1 * radii * np.sin(angles)], axis=1)
        frame = np.zeros((68, 2))
        frame[lips] = poly
        exact, counted = metrics.mouth_area(frame), pixel_area(poly)
        assert abs(exact - counted) / counted < 0.02, (exact, counted)


def test_oracle_suite(record_criterion):
    checks = [
        t_fv.test_matches_oracle_on_random_instances,   # mms_loss
        t_lg.test_losses_match_oracle,                  # l_d, l_in, l_q, L_L
        t_met.test_metrics_match_loop_oracles,          # D-LL, D-VL, D-A with loop shoelace
        t_met.test_area_matches_pixel_count,
        check_shoelace_vs_pixels,
    ]
    failures, elapsed = run_checks(checks)
    verdict(record_criterion, "oracle suite", failures, elapsed, extra="each on >= 20 random instances")


# --- shapes --------------------------------------------------------------------------------


def check_headline_shapes():
    torch.manual_seed(0)
    cfg = lg.LandmarkConfig()
    model = lg.LandmarkGenerator(cfg).eval()
    rng = np.random.default_rng(0)
    mel = torch.tensor(rng.normal(size=(1, 9, 80)), dtype=torch.float32)
    base = torch.tensor(synth.make_identity(0, 1).neutral_landmarks(), dtype=torch.float32)[None]
    quat = torch.tensor([[1.0, 0, 0, 0]])
    cond = model.encoder(mel, base[..., :2].reshape(1, 136), quat)
    assert cond.shape == (1, 9, 644), cond.shape
    dp, dq = model.decoder(cond)
    assert torch.cat([dp, dq], dim=-1).shape == (1, 9, 140)
    assert dp.shape[-1] == 136 and dq.shape[-1] == 4

    teacher, encoder = fv.SpeechTeacher(), fv.FaceEncoder()
    assert fv.embed_speech(rng.normal(size=(40, 80)).astype(np.float32), teacher).shape == (1024,)
    assert fv.embed_face(rng.random((3, 160, 160)).astype(np.float32), encoder).shape == (1024,)

    stack = rd.stack_condition(rd.rasterize_sketch(base[0].numpy()), rng.random((3, 256, 256)))
    assert stack.shape == (6, 256, 256)
    assert rd.generate_frame(stack, rd.UNet()).shape == (3, 256, 256)


def test_shape_suite(record_criterion):
    failures, elapsed = run_checks([check_headline_shapes, t_lg.test_condition_widths, t_lg.test_full_widths_default,
                                    t_fv.test_embedding_shapes_and_norms])
    verdict(record_criterion, "shape suite", failures, elapsed, extra="644 / 140 / 1024 / 6x256x256")


# --- overfit -------------------------------------------------------------------------------


def overfit_landmark():
    torch.manual_seed(0)
    clips = synth.synth_corpus(seed=21, n_identities=5, clips_per_id=1, clip_seconds=3.0)
    tracks = [lg.make_track(c.mel, c.landmarks) for c in clips]
    model = lg.LandmarkGenerator(lg.desk_config())

    def measure():
        with torch.no_grad():
            r = lg.evaluate_tracks(model, tracks)
        pred, gt = r["pred"].points.numpy(), r["batch"]["posed"].numpy()
        return r["losses"]["l_l"], float(np.mean([metrics.d_ll(pred[i], gt[i]) for i in range(len(tracks))]))

    l0, _ = measure()
    lg.train_landmarks(model, tracks, 2000, seed=0)
    l1, dll = measure()
    ok = l1 < 0.05 * l0 and dll < 0.02
    return ok, f"L_L {l0:.1f} -> {l1:.2f} ({l1 / l0:.2%} of initial, need < 5%), D-LL {dll:.4f} (need < 0.02)"


def overfit_tts():
    torch.manual_seed(0)
    lex = load_lexicon()
    clip = synth.make_clip(synth.make_identity(0, 1), 0, 2, 1.0, lex, text="malinu")
    ids = phonemize("malinu", lex)
    spk = torch.nn.functional.normalize(torch.randn(1024), dim=0).numpy()
    model = tm.Tacotron(tm.TtsConfig(dropout=0.1))
    tm.train_tts(model, [ids], [clip.mel], [spk], 1200, lr=2e-3, seed=0, batch=1)
    mse, align = tm.mel_mse(model, ids, spk, clip.mel)
    monotone = tm.attention_is_monotone(align)
    return mse < 0.02 and monotone, f"mel MSE {mse:.4f} (need < 0.02), monotone argmax path {monotone}"


def overfit_renderer():
    torch.manual_seed(0)
    ident = synth.make_identity(0, 3)
    clip = synth.make_clip(ident, 0, 1, 1.0, load_lexicon())
    stack = rd.stack_condition(rd.rasterize_sketch(clip.landmarks[40]), clip.face)
    target = synth.render_face(ident, clip.landmarks[40], clip.quats[40])
    cfg = rd.RendererConfig()
    gen, disc = rd.UNet(base=cfg.base_channels, depth=cfg.depth), rd.PatchDiscriminator(base=cfg.disc_channels)
    rd.train_renderer(gen, disc, [stack], [target], 400, cfg)
    mae = float(np.abs(rd.generate_frame(stack, gen) - target).mean())
    return mae < 0.02, f"MAE {mae:.4f} (need < 0.02)"


def overfit_face_voice():
    clips = synth.synth_corpus(seed=5, n_identities=4, clips_per_id=8, clip_seconds=1.0)
    labels = [c.identity.index for c in clips]
    train = [i for i in range(len(clips)) if i % 8 < 6]
    held = [i for i in range(len(clips)) if i % 8 >= 6]
    cfg = fv.FaceVoiceConfig(teacher_steps=150, extractor_steps=60, projection_steps=200)
    pick = lambda attr, idx: [getattr(clips[i], attr) for i in idx]  # noqa: E731
    teacher, _ = fv.pretrain_teacher(pick("mel", train), [labels[i] for i in train], cfg)
    extractor, _ = fv.pretrain_face_extractor(pick("face", train), [labels[i] for i in train], cfg)
    encoder, _ = fv.train_face_encoder(pick("face", train), pick("mel", train), [labels[i] for i in train],
                                       teacher, extractor, cfg)
    f = fv.embed_face(fv.prepare_face(np.stack(pick("face", held))), encoder)
    s = fv.embed_speech(np.stack(pick("mel", held)), teacher)
    lab = [labels[i] for i in held]
    acc = fv.retrieval_accuracy(f, s, lab, lab)
    return acc > 0.25, f"held-out top-1 {acc:.3f} over {len(held)} clips (chance 0.25)"


@pytest.mark.slow
def test_overfit_suite(record_criterion):
    parts = [("(a) landmark_gen", overfit_landmark), ("(b) tts", overfit_tts),
             ("(c) renderer", overfit_renderer), ("(d) face_voice", overfit_face_voice)]
    results = []
    total = 0.0
    for name, run in parts:
        t0 = time.perf_counter()
        ok, detail = run()
        spent = time.perf_counter() - t0
        total += spent
        record_criterion(f"overfit {name}", ok, f"[{spent:.0f}s] {detail}")
        results.append((name, ok, detail))
    record_criterion("overfit suite total runtime", total < 1200, f"{total:.0f}s (budget 1200s)")
    assert all(ok for _, ok, _ in results), [r for r in results if not r[1]]
    assert total < 1200


# --- Griffin-Lim ---------------------------------------------------------------------------


def test_griffin_lim(record_criterion):
    failures, elapsed = run_checks([t_voc.test_error_non_increasing_on_random_spectrograms,
                                    t_voc.test_tone_recovers_dominant_bin])
    verdict(record_criterion, "griffin-lim", failures, elapsed,
            extra="non-increasing error on 10 spectrograms x 60 iterations; 440 Hz in bin 28")


# --- end to end ----------------------------------------------------------------------------

E2E = {
    "checkpoint_every": 50,
    "face_voice": {"teacher_steps": 20, "extractor_steps": 20, "projection_steps": 20, "batch": 4},
    "tts": {"steps": 20, "batch": 4, "max_frames": 120, "griffin_lim_iters": 20},
    "landmark": {"steps": 20, "batch": 4},
    "renderer": {"steps": 10, "base_channels": 8, "depth": 4, "frames_per_clip": 2},
}


@pytest.mark.slow
def test_end_to_end(record_criterion, tmp_path):
    t0 = time.perf_counter()
    corpus = tmp_path / "corpus"
    write_corpus(synth.synth_corpus(8, 2, 3, 1.0), corpus, 8, 1.0)
    cfg = parse_config({**json.loads(json.dumps(E2E)), "seed": 17, "corpus_dir": str(corpus),
                        "output_dir": str(tmp_path / "run")})
    for stage in STAGES:
        train_stage(stage, cfg)
    face, lms = corpus / "id_001" / "face.png", corpus / "id_001" / "face_landmarks.json"
    text = "ba mi lu"
    m1 = generate(text, face, lms, cfg, out_dir=tmp_path / "a")
    m2 = generate(text, face, lms, cfg, out_dir=tmp_path / "b")
    plain = generate(text, face, lms, cfg.model_copy(update={"watermark": False}), out_dir=tmp_path / "plain")
    failures = []

    duration = io.wav_duration(tmp_path / "a" / "audio.wav")
    frames = sorted((tmp_path / "a" / "frames").glob("frame_*.png"))
    expected = round(duration * 25)
    if not (len(frames) == m1["count"] == expected):
        failures.append(f"{len(frames)} frames, manifest {m1['count']}, expected {expected}")
    if abs(m1["duration"] - duration) > 1e-9:
        failures.append(f"manifest duration {m1['duration']} vs WAV header {duration}")

    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    if m1 != m2 or any((tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes() for f in files):
        failures.append("second run differs")

    marked = 0
    for k in range(plain["count"]):
        on = io.read_png(tmp_path / "a" / "frames" / f"frame_{k:05d}.png")
        off = io.read_png(tmp_path / "plain" / "frames" / f"frame_{k:05d}.png")
        region = np.abs(on[:, -16:, -16:] - rd.apply_watermark(off)[:, -16:, -16:]).max()
        if np.array_equal(on[:, :-16], off[:, :-16]) and np.array_equal(on[:, -16:, :-16], off[:, -16:, :-16]) \
                and region <= 1 / 255 + 1e-6:
            marked += 1
    if marked != len(frames):
        failures.append(f"only {marked}/{len(frames)} frames carry the watermark")
    verdict(record_criterion, "end-to-end generate", failures, time.perf_counter() - t0,
            extra=f"{len(frames)} watermarked frames for {duration:.4f}s audio, {len(files)} files bit-identical")
