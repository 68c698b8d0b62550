"""On-disk formats: tensor blobs with a JSON header, WAV, PNG and JSON files.

Blob layout (little endian)::

    b"THBLOB" | u16 version | u64 header length | header JSON | pad to 8 | payload

The header carries caller metadata plus an ``arrays`` table mapping each array
name to its dtype, shape, byte offset and byte count inside the payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import wave
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BlobFormatError

BLOB_MAGIC = b"THBLOB"
BLOB_VERSION = 1
_PREFIX = struct.Struct("<6sHQ")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def pack_blob(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    table = {}
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        table[name] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        pad = (-len(raw)) % 8
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    head = dict(header)
    head["arrays"] = table
    head_raw = json.dumps(head, sort_keys=True).encode()
    head_raw += b" " * ((-(len(head_raw) + _PREFIX.size)) % 8)
    return _PREFIX.pack(BLOB_MAGIC, BLOB_VERSION, len(head_raw)) + head_raw + b"".join(chunks)


def unpack_blob(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size:
        raise BlobFormatError("truncated blob")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != BLOB_MAGIC:
        raise BlobFormatError("bad magic")
    if version > BLOB_VERSION:
        raise BlobFormatError(f"blob version {version} is newer than supported {BLOB_VERSION}")
    start = _PREFIX.size
    header = json.loads(data[start:start + hlen])
    base = start + hlen
    arrays = {}
    for name, meta in header.pop("arrays").items():
        lo = base + meta["offset"]
        buf = data[lo:lo + meta["nbytes"]]
        if len(buf) != meta["nbytes"]:
            raise BlobFormatError(f"array {name!r} truncated")
        arrays[name] = np.frombuffer(buf, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"]).copy()
    header["blob_version"] = version
    return header, arrays


def write_blob(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, pack_blob(header, arrays))


def read_blob(path) -> tuple[dict, dict[str, np.ndarray]]:
    return unpack_blob(Path(path).read_bytes())


def write_mel(path, mel: np.ndarray, hop_ms: float, win_ms: float) -> None:
    mel = np.asarray(mel, dtype=np.float32)
    header = {"kind": "mel", "frames": int(mel.shape[0]), "bins": int(mel.shape[1]),
              "hop_ms": hop_ms, "win_ms": win_ms}
    write_blob(path, header, {"mel": mel})


def read_mel(path) -> tuple[np.ndarray, dict]:
    header, arrays = read_blob(path)
    return arrays["mel"], header


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono 16-bit PCM. Samples are floats in [-1, 1] and are clipped."""
    pcm = np.round(np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        with wave.open(tmp, "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(sample_rate)
            wf.writeframes(pcm.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2 or wf.getnchannels() != 1:
            raise ValueError("only mono 16-bit PCM is supported")
        rate = wf.getframerate()
        pcm = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767.0, rate


def wav_duration(path) -> float:
    with wave.open(str(path), "rb") as wf:
        return wf.getnframes() / wf.getframerate()


def write_png(path, image: np.ndarray) -> None:
    """``image`` is channel-first float in [0, 1]; written as RGB8."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected 3xHxW image, got {arr.shape}")
    rgb = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(rgb, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return rgb.transpose(2, 0, 1).copy()
