"""Stage checkpoints stored as blobs: module weights, optimizer state, progress."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import io
from ..errors import BlobFormatError, ConfigHashMismatch, MissingPrerequisite

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    stage: str
    step: int
    config_hash: str
    modules: dict = field(default_factory=dict)       # name -> state dict of tensors
    optimizers: dict = field(default_factory=dict)    # name -> optimizer state dict
    extra: dict = field(default_factory=dict)         # JSON-serialisable progress info
    version: int = CHECKPOINT_VERSION


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().copy()


def _pack_optimizer(prefix: str, state: dict, arrays: dict) -> dict:
    """Split an optimizer state dict into tensors (arrays) and a JSON skeleton."""
    skeleton = {"param_groups": state["param_groups"], "state": {}}
    for pid, slots in state["state"].items():
        entry = {}
        for key, value in slots.items():
            if torch.is_tensor(value):
                name = f"{prefix}/{pid}/{key}"
                arrays[name] = _to_numpy(value)
                entry[key] = {"tensor": name}
            else:
                entry[key] = value
        skeleton["state"][str(pid)] = entry
    return skeleton


def _unpack_optimizer(skeleton: dict, arrays: dict) -> dict:
    state = {}
    for pid, slots in skeleton["state"].items():
        state[int(pid)] = {
            key: torch.from_numpy(arrays[v["tensor"]]) if isinstance(v, dict) and "tensor" in v else v
            for key, v in slots.items()
        }
    groups = []
    for g in skeleton["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    return {"state": state, "param_groups": groups}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, sd in ckpt.modules.items():
        for key, tensor in sd.items():
            arrays[f"module/{name}/{key}"] = _to_numpy(tensor)
    optimizers = {name: _pack_optimizer(f"optim/{name}", sd, arrays) for name, sd in ckpt.optimizers.items()}
    header = {
        "kind": "checkpoint",
        "checkpoint_version": ckpt.version,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "config_hash": ckpt.config_hash,
        "modules": sorted(ckpt.modules),
        "optimizers": optimizers,
        "extra": ckpt.extra,
    }
    io.write_blob(path, header, arrays)


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisite(f"checkpoint {path} not found")
    header, arrays = io.read_blob(path)
    if header.get("kind") != "checkpoint":
        raise BlobFormatError(f"{path} is not a checkpoint")
    if header["checkpoint_version"] > CHECKPOINT_VERSION:
        raise BlobFormatError(f"checkpoint version {header['checkpoint_version']} is newer than supported")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise ConfigHashMismatch(
            f"{path} was written with config hash {header['config_hash'][:12]}, current config is {expected_hash[:12]}")
    modules: dict[str, dict] = {name: {} for name in header["modules"]}
    for key, arr in arrays.items():
        if key.startswith("module/"):
            _, name, param = key.split("/", 2)
            modules[name][param] = torch.from_numpy(arr)
    optimizers = {name: _unpack_optimizer(sk, arrays) for name, sk in header["optimizers"].items()}
    return Checkpoint(header["stage"], header["step"], header["config_hash"], modules, optimizers,
                      header.get("extra", {}), header["checkpoint_version"])
