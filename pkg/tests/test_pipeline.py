import json
import math
import shutil

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from talkinghead import io, metrics
from talkinghead.data.audio import DEFAULT_STFT
from talkinghead.data.corpus import read_sequence_json, write_corpus, write_sequence_json
from talkinghead.data.synth import synth_corpus
from talkinghead.errors import ConfigHashMismatch, CorpusNotFound, InvalidConfig, LengthMismatch, MissingPrerequisite
from talkinghead.pipeline import cli
from talkinghead.pipeline.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from talkinghead.pipeline.config import OUTPUT_DIR_ENV, STAGES, parse_config
from talkinghead.pipeline.evaluate import evaluate
from talkinghead.pipeline.generate import generate, select_frames
from talkinghead.pipeline.stages import checkpoint_path, log_path, read_log, train_stage

TINY = {
    "checkpoint_every": 2,
    "face_voice": {"teacher_steps": 3, "extractor_steps": 3, "projection_steps": 4, "batch": 2},
    "tts": {"steps": 5, "batch": 2, "max_frames": 30, "griffin_lim_iters": 4},
    "landmark": {"steps": 5, "batch": 2},
    "renderer": {"steps": 4, "base_channels": 4, "depth": 3, "frames_per_clip": 1},
}


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(synth_corpus(3, 2, 2, 1.0), root, 3, 1.0)
    return root


def tiny_config(corpus_dir, out, seed=5, **overrides):
    raw = json.loads(json.dumps(TINY))
    raw.update(seed=seed, corpus_dir=str(corpus_dir), output_dir=str(out))
    for key, value in overrides.items():
        if isinstance(value, dict):
            raw[key].update(value)
        else:
            raw[key] = value
    return parse_config(raw)


@pytest.fixture(scope="module")
def trained(corpus_dir, tmp_path_factory):
    cfg = tiny_config(corpus_dir, tmp_path_factory.mktemp("run"))
    for stage in STAGES:
        train_stage(stage, cfg)
    return cfg


def face_inputs(corpus_dir):
    return corpus_dir / "id_000" / "face.png", corpus_dir / "id_000" / "face_landmarks.json"


# --- config ----------------------------------------------------------------------


def test_config_requires_seed_and_rejects_unknown_keys():
    with pytest.raises(InvalidConfig, match="seed"):
        parse_config({})
    with pytest.raises(InvalidConfig, match="colour"):
        parse_config({"seed": 1, "colour": "red"})
    with pytest.raises(InvalidConfig):
        parse_config({"seed": 1, "tts": {"stepz": 3}})
    with pytest.raises(InvalidConfig):
        parse_config({"seed": 1, "output_fps": 60})
    assert parse_config({"seed": 1}).output_fps == 25


def test_stage_hash_ignores_step_budget_only():
    a = parse_config({"seed": 1})
    assert a.stage_hash("tts") == parse_config({"seed": 1, "tts": {"steps": 9}}).stage_hash("tts")
    assert a.stage_hash("tts") != parse_config({"seed": 1, "tts": {"lr": 1e-4}}).stage_hash("tts")
    assert a.stage_hash("tts") != parse_config({"seed": 2}).stage_hash("tts")
    assert a.stage_hash("tts") != a.stage_hash("landmark")


def test_output_dir_env_override(monkeypatch, tmp_path):
    cfg = parse_config({"seed": 1, "output_dir": "elsewhere"})
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path))
    assert cfg.output_path == tmp_path


# --- checkpoints -------------------------------------------------------------------


def test_checkpoint_roundtrip_including_optimizer(tmp_path):
    torch.manual_seed(0)
    net = torch.nn.Linear(3, 2)
    opt = torch.optim.Adam(net.parameters(), lr=0.01)
    net(torch.randn(4, 3)).sum().backward()
    opt.step()
    save_checkpoint(tmp_path / "c.ckpt", Checkpoint("tts", 7, "abc", {"net": net.state_dict()},
                                                    {"net": opt.state_dict()}, {"k": [1, 2]}))
    back = load_checkpoint(tmp_path / "c.ckpt", expected_hash="abc")
    assert back.step == 7 and back.extra == {"k": [1, 2]}
    for key, t in net.state_dict().items():
        assert torch.equal(back.modules["net"][key], t)
    opt2 = torch.optim.Adam(torch.nn.Linear(3, 2).parameters(), lr=0.5)
    opt2.load_state_dict(back.optimizers["net"])
    for s_old, s_new in zip(opt.state.values(), opt2.state.values()):
        assert torch.equal(s_old["exp_avg"], s_new["exp_avg"])
    assert opt2.param_groups[0]["lr"] == 0.01
    with pytest.raises(ConfigHashMismatch):
        load_checkpoint(tmp_path / "c.ckpt", expected_hash="xyz")
    with pytest.raises(MissingPrerequisite):
        load_checkpoint(tmp_path / "missing.ckpt")


# --- training ---------------------------------------------------------------------


def test_missing_corpus(tmp_path):
    cfg = tiny_config(tmp_path / "nowhere", tmp_path / "out")
    with pytest.raises(CorpusNotFound):
        train_stage("landmark", cfg)


def test_tts_needs_face_voice(corpus_dir, tmp_path):
    with pytest.raises(MissingPrerequisite):
        train_stage("tts", tiny_config(corpus_dir, tmp_path))


def test_resume_hash_mismatch(corpus_dir, tmp_path):
    train_stage("landmark", tiny_config(corpus_dir, tmp_path), until=2)
    changed = tiny_config(corpus_dir, tmp_path, landmark={"lr": 5e-4})
    with pytest.raises(ConfigHashMismatch):
        train_stage("landmark", changed, resume=True)


def _state_equal(a, b):
    assert a.step == b.step
    for name in a.modules:
        for key, t in a.modules[name].items():
            assert torch.equal(t, b.modules[name][key]), (name, key)


@pytest.mark.parametrize("stage,until", [("landmark", 2), ("tts", 3), ("renderer", 2), ("face_voice", 8),
                                         ("face_voice", 3)])
def test_resume_reproduces_uninterrupted_run(corpus_dir, tmp_path, stage, until):
    full_cfg = tiny_config(corpus_dir, tmp_path / "full")
    part_cfg = tiny_config(corpus_dir, tmp_path / "part")
    if stage == "tts":
        train_stage("face_voice", full_cfg)
        shutil.copytree(tmp_path / "full" / "checkpoints", tmp_path / "part" / "checkpoints")
    full = train_stage(stage, full_cfg)
    stopped = train_stage(stage, part_cfg, until=until)
    assert stopped.step == until
    resumed = train_stage(stage, part_cfg, resume=True)
    _state_equal(full, resumed)
    assert read_log(log_path(full_cfg, stage)) == read_log(log_path(part_cfg, stage))
    steps = [r["step"] for r in read_log(log_path(part_cfg, stage))]
    assert steps == sorted(steps) and len(steps) == len(set(steps))


def test_training_log_lines(trained):
    for stage in STAGES:
        rows = read_log(log_path(trained, stage))
        assert rows and all(set(r) >= {"step", "losses"} for r in rows)
        assert all(math.isfinite(v) for r in rows for v in r["losses"].values())


# --- generate -------------------------------------------------------------------------


@given(st.integers(2, 1000), st.floats(1.0, 30.0))
@settings(max_examples=200, deadline=None)
def test_frame_selection_strictly_increasing_and_covering(n_mel, fps):
    duration = DEFAULT_STFT.n_samples(n_mel) / DEFAULT_STFT.sample_rate
    idx = select_frames(n_mel, duration, fps)
    assert len(idx) == round(duration * fps)
    assert np.all(np.diff(idx) > 0)
    if len(idx):
        assert idx.min() >= 0 and idx.max() <= n_mel - 1
    # the shown frames span the audio to within half an output period
    assert abs(len(idx) / fps - duration) <= 0.5 / fps + 1e-9
    # each pick is a nearest mel frame by brute force over frame centres
    centres = (np.arange(n_mel) * DEFAULT_STFT.hop_length + DEFAULT_STFT.win_length / 2) / DEFAULT_STFT.sample_rate
    for k, i in enumerate(idx):
        gaps = np.abs(centres - k / fps)
        assert gaps[i] <= gaps.min() + 1e-9


def test_frame_count_arithmetic():
    # 2.0 s of audio at 25 fps -> 50 frames
    n_mel = DEFAULT_STFT.n_frames(32000)
    assert len(select_frames(n_mel, 2.0, 25)) == 50


def test_generate_bundle_is_complete_and_reproducible(trained, corpus_dir, tmp_path):
    face, lms = face_inputs(corpus_dir)
    m1 = generate("malinu", face, lms, trained, out_dir=tmp_path / "a")
    m2 = generate("malinu", face, lms, trained, out_dir=tmp_path / "b")
    assert m1 == m2
    names = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert names == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    duration = io.wav_duration(tmp_path / "a" / "audio.wav")
    assert m1["duration"] == pytest.approx(duration, abs=1e-12)
    frames = sorted((tmp_path / "a" / "frames").glob("frame_*.png"))
    assert len(frames) == m1["count"] == round(duration * 25)
    assert any("NoStopWarning" in w for w in m1["warnings"])   # 5 training steps never learn to stop
    pts, quats, header = read_sequence_json(tmp_path / "a" / "landmarks.json")
    assert header["fps"] == 80 and len(pts) == m1["mel_frames"]
    np.testing.assert_allclose(np.linalg.norm(quats, axis=1), 1, atol=1e-9)


def test_watermark_flag(trained, corpus_dir, tmp_path):
    face, lms = face_inputs(corpus_dir)
    generate("malinu", face, lms, trained, out_dir=tmp_path / "on")
    plain = trained.model_copy(update={"watermark": False})
    generate("malinu", face, lms, plain, out_dir=tmp_path / "off")
    on = io.read_png(tmp_path / "on" / "frames" / "frame_00000.png")
    off = io.read_png(tmp_path / "off" / "frames" / "frame_00000.png")
    assert np.array_equal(on[:, :-16, :], off[:, :-16, :])
    assert not np.array_equal(on[:, -16:, -16:], off[:, -16:, -16:])


def test_generate_requires_all_checkpoints(trained, corpus_dir, tmp_path):
    shutil.copytree(trained.output_path / "checkpoints", tmp_path / "checkpoints")
    (tmp_path / "checkpoints" / "renderer.ckpt").unlink()
    cfg = trained.model_copy(update={"output_dir": str(tmp_path)})
    face, lms = face_inputs(corpus_dir)
    with pytest.raises(MissingPrerequisite, match="renderer"):
        generate("malinu", face, lms, cfg, out_dir=tmp_path / "g")


# --- evaluate ----------------------------------------------------------------------------


def _write_tracks(root, seqs):
    for name, pts in seqs.items():
        write_sequence_json(root / name, pts, np.tile([1.0, 0, 0, 0], (len(pts), 1)), 80)


def test_evaluate_identical_dirs_is_zero(corpus_dir, tmp_path):
    result = evaluate(corpus_dir, corpus_dir, out_dir=tmp_path)
    assert result["mean"]["d_ll"] == 0 and result["mean"]["d_vl"] == 0 and result["mean"]["d_a"] == 0
    assert "units" in result["mean"] and json.loads((tmp_path / "report.json").read_text())["units"]
    assert "D-LL" in (tmp_path / "report.txt").read_text()


def test_evaluate_matches_metrics_module(tmp_path):
    rng = np.random.default_rng(0)
    a = {"x.landmarks.json": rng.normal(size=(6, 68, 3)) * 0.3, "sub/y.landmarks.json": rng.normal(size=(4, 68, 3)) * 0.3}
    b = {k: v + rng.normal(scale=0.01, size=v.shape) for k, v in a.items()}
    _write_tracks(tmp_path / "p", a)
    _write_tracks(tmp_path / "g", b)
    result = evaluate(tmp_path / "p", tmp_path / "g")
    for name in a:
        direct = metrics.report(a[name], b[name])
        for key in ("d_ll", "d_vl", "d_a"):
            assert result["files"][name][key] == pytest.approx(direct[key], rel=1e-9)
    assert result["mean"]["d_ll"] == pytest.approx(np.mean([result["files"][n]["d_ll"] for n in a]))


def test_evaluate_length_mismatch(tmp_path):
    rng = np.random.default_rng(1)
    _write_tracks(tmp_path / "p", {"x.landmarks.json": rng.normal(size=(5, 68, 3))})
    _write_tracks(tmp_path / "g", {"x.landmarks.json": rng.normal(size=(6, 68, 3))})
    with pytest.raises(LengthMismatch):
        evaluate(tmp_path / "p", tmp_path / "g")
    _write_tracks(tmp_path / "g", {"z.landmarks.json": rng.normal(size=(5, 68, 3))})
    with pytest.raises(LengthMismatch):
        evaluate(tmp_path / "p", tmp_path / "g")


# --- CLI -------------------------------------------------------------------------------


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


def test_cli_errors_are_json(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 1, "bogus": 2}))
    assert cli.main(["train", "landmark", "--config", str(cfg)]) != 0
    assert _error(capsys)["error"] == "invalid_config"

    cfg.write_text(json.dumps({"seed": 1, "corpus_dir": str(tmp_path / "none"), "output_dir": str(tmp_path)}))
    assert cli.main(["train", "landmark", "--config", str(cfg)]) != 0
    assert _error(capsys)["error"] == CorpusNotFound.code

    assert cli.main(["generate", "--config", str(cfg), "--text", "ma", "--face", "f.png", "--landmarks", "l"]) != 0
    assert _error(capsys)["error"] == MissingPrerequisite.code

    assert cli.main(["train", "nonsense", "--config", str(cfg)]) != 0
    assert _error(capsys)["error"] == "usage"


def test_cli_data_synth_and_evaluate(tmp_path, capsys):
    out = tmp_path / "c"
    assert cli.main(["data", "synth", "--seed", "2", "--ids", "1", "--clips", "1", "--seconds", "1", "--out", str(out)]) == 0
    assert json.loads(capsys.readouterr().out)["clips"] == 1
    assert (out / "manifest.json").exists()
    assert cli.main(["evaluate", "--pred", str(out), "--gt", str(out)]) == 0
    assert json.loads(capsys.readouterr().out)["d_ll"] == 0


def test_cli_config_init_roundtrip(tmp_path):
    path = tmp_path / "c.json"
    assert cli.main(["config", "init", "--seed", "4", "--out", str(path)]) == 0
    assert parse_config(json.loads(path.read_text())).seed == 4


def test_checkpoint_paths(trained):
    for stage in STAGES:
        assert checkpoint_path(trained, stage).exists()
