"""Single-file model checkpoints and run manifests.

Layout (all integers little-endian)::

    b"OFCKPT\\x00\\x00"            8-byte magic
    uint32 format version
    uint32 header length H
    H bytes of UTF-8 JSON       {"format_version", "kind", "hyperparams", "config_hash",
                                 "tensors": [{"name", "shape"}, ...]}
    float64 data                each tensor row-major, in header order

The JSON is written with sorted keys and no whitespace, and tensors are sorted
by name, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import struct
import subprocess
from dataclasses import asdict
from pathlib import Path
from typing import Mapping

import numpy as np

from .embedding import EmbedModel
from .fom import FomConfig, FomModel
from .pog import PogConfig, PogModel

MAGIC = b"OFCKPT\x00\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def encode(kind: str, hyperparams: Mapping, params: Mapping[str, np.ndarray]) -> bytes:
    names = sorted(params)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "hyperparams": dict(hyperparams),
        "config_hash": config_hash({"kind": kind, "hyperparams": dict(hyperparams)}),
        "tensors": [{"name": n, "shape": list(np.shape(params[n]))} for n in names],
    }
    hb = canonical_json(header).encode("utf-8")
    body = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names)
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(hb)) + hb + body


def decode(blob: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    params = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"truncated checkpoint at tensor {t['name']}")
        params[t["name"]] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return header["kind"], header["hyperparams"], params


def save(path, model) -> Path:
    kind, hyper, params = _unpack(model)
    path = Path(path)
    path.write_bytes(encode(kind, hyper, params))
    return path


def load(path):
    kind, hyper, params = decode(Path(path).read_bytes())
    if kind == "embed":
        return EmbedModel(params["fuse.w"], params["fuse.b"], hyper["margin"],
                          tuple(hyper["modalities"]), dict(hyper["dims"]))
    if kind == "fom":
        return FomModel(FomConfig(**hyper), params)
    if kind == "pog":
        return PogModel(PogConfig(**hyper), params)
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def _unpack(model) -> tuple[str, dict, dict[str, np.ndarray]]:
    if isinstance(model, EmbedModel):
        return "embed", {"margin": model.margin, "modalities": list(model.modalities),
                         "dims": dict(model.dims)}, model.params()
    if isinstance(model, FomModel):
        return "fom", asdict(model.config), model.params
    if isinstance(model, PogModel):
        return "pog", asdict(model.config), model.params
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out_dir, command: str, argv: list[str], config: Mapping, seed: int,
                   artifacts: list[Path]) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": dict(config),
        "config_hash": config_hash(dict(config)),
        "seed": seed,
        "git_describe": git_describe(),
        "artifacts": {Path(a).name: file_hash(a) for a in sorted(artifacts)},
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path
