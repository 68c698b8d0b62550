"""Command-line entry point: ``talkinghead {data synth,train,generate,evaluate,config init}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import TalkingHeadError
from .config import STAGES, PipelineConfig, load_config


def _data_synth(args) -> dict:
    from ..data.corpus import write_corpus
    from ..data.synth import synth_corpus

    clips = synth_corpus(args.seed, args.ids, args.clips, args.seconds)
    out = write_corpus(clips, args.out, args.seed, args.seconds)
    return {"corpus": str(out), "clips": len(clips), "identities": args.ids}


def _train(args) -> dict:
    from .stages import checkpoint_path, train_stage

    cfg = load_config(args.config)
    ckpt = train_stage(args.stage, cfg, resume=args.resume, until=args.until)
    return {"stage": ckpt.stage, "step": ckpt.step, "checkpoint": str(checkpoint_path(cfg, args.stage)),
            "config_hash": ckpt.config_hash}


def _generate(args) -> dict:
    from .generate import generate

    cfg = load_config(args.config)
    return generate(args.text, args.face, args.landmarks, cfg, out_dir=args.out)


def _evaluate(args) -> dict:
    from .evaluate import evaluate, format_report

    result = evaluate(args.pred, args.gt, out_dir=args.out)
    print(format_report(result), file=sys.stderr)
    return result["mean"]


def _config_init(args) -> dict:
    cfg = PipelineConfig(seed=args.seed, corpus_dir=args.corpus, output_dir=args.output)
    text = json.dumps(cfg.model_dump(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        return {"config": args.out}
    sys.stdout.write(text)
    return {}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talkinghead", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="corpus tools").add_subparsers(dest="action", required=True)
    p = data.add_parser("synth", help="write a deterministic synthetic corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ids", type=int, default=4, help="number of identities")
    p.add_argument("--clips", type=int, default=4, help="clips per identity")
    p.add_argument("--seconds", type=float, default=3.0, help="clip length")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_data_synth)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true", help="continue from the stage checkpoint")
    p.add_argument("--until", type=int, default=None, help="stop after this global step")
    p.set_defaults(func=_train)

    p = sub.add_parser("generate", help="text + face image -> frames, WAV and manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--face", required=True, help="256x256 RGB PNG")
    p.add_argument("--landmarks", required=True, help="frame JSON with the face's 68 landmarks")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_generate)

    p = sub.add_parser("evaluate", help="landmark metrics between two directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_evaluate)

    cfg = sub.add_parser("config", help="configuration helpers").add_subparsers(dest="action", required=True)
    p = cfg.add_parser("init", help="print a config with every default filled in")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--corpus", default="corpus")
    p.add_argument("--output", default="runs")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_config_init)
    return parser


def _fail(code: str, message: str, status: int = 1) -> int:
    print(json.dumps({"error": code, "message": message}), file=sys.stderr)
    return status


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail("usage", "invalid command line; see --help", 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except TalkingHeadError as exc:
        return _fail(exc.code, str(exc))
    except (OSError, ValueError) as exc:
        return _fail(type(exc).__name__.lower(), str(exc))
    if result:
        print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
