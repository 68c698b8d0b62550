"""Compare predicted landmark sequences against ground truth, directory by directory."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .. import metrics
from ..data.corpus import read_sequence_json
from ..errors import CorpusNotFound, LengthMismatch
from ..io import atomic_write_bytes, write_json

PATTERN = "*.landmarks.json"


def _collect(root: Path) -> dict[str, Path]:
    if not root.is_dir():
        raise CorpusNotFound(f"{root} is not a directory")
    return {str(p.relative_to(root)): p for p in sorted(root.rglob(PATTERN))}


def evaluate(pred_dir, gt_dir, out_dir=None) -> dict:
    """Metrics per matched file plus their unweighted means.

    Files are paired by path relative to each root. Both sides must hold the
    same set of files and each pair must have the same frame count.
    """
    pred, gt = _collect(Path(pred_dir)), _collect(Path(gt_dir))
    if not gt:
        raise CorpusNotFound(f"no {PATTERN} files under {gt_dir}")
    if set(pred) != set(gt):
        only_p, only_g = sorted(set(pred) - set(gt)), sorted(set(gt) - set(pred))
        raise LengthMismatch(f"file sets differ: only in pred {only_p[:5]}, only in gt {only_g[:5]}")
    files = {}
    for name in sorted(gt):
        p, _, _ = read_sequence_json(pred[name])
        g, _, _ = read_sequence_json(gt[name])
        try:
            files[name] = metrics.report(p, g)
        except LengthMismatch as exc:
            raise LengthMismatch(f"{name}: {exc}") from exc
    mean = {}
    for key in ("d_ll", "d_vl", "d_a"):
        vals = [r[key] for r in files.values() if r[key] is not None]
        mean[key] = float(np.mean(vals)) if vals else None
    mean["frames"] = int(sum(r["frames"] for r in files.values()))
    mean["units"] = metrics.UNITS
    result = {"mean": mean, "files": files, "units": metrics.UNITS}
    if out_dir is not None:
        out = Path(out_dir)
        write_json(out / "report.json", result)
        atomic_write_bytes(out / "report.txt", (format_report(result) + "\n").encode())
    return result


def format_report(result: dict) -> str:
    parts = [f"files: {len(result['files'])}", metrics.format_table(result["mean"])]
    for name, rep in result["files"].items():
        vl = "n/a" if rep["d_vl"] is None else f"{rep['d_vl']:.6f}"
        parts.append(f"{name}: D-LL {rep['d_ll']:.6f}  D-VL {vl}  D-A {rep['d_a']:.6f}")
    return "\n".join(parts)
