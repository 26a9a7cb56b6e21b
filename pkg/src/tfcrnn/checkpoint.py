"""Binary checkpoint files.

Layout::

    b"TFCRNN1\\n"
    uint64 LE   manifest length in bytes
    manifest    UTF-8 JSON: configs, schedule, history, tensor directory
    payload     raw little-endian float32 tensors at the listed offsets
    8 bytes     BLAKE2b-64 checksum of the payload region
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict

import numpy as np

from .model import ModelConfig, TFCRNN
from .nn import ShapeError
from .trainer import Checkpoint, EpochRecord, ScheduleState, TrainConfig

MAGIC = b"TFCRNN1\n"
FORMAT_VERSION = 1
VELOCITY_PREFIX = "velocity/"


class CheckpointError(ValueError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError, ShapeError):
    def __init__(self, name: str, expected: tuple, found: tuple):
        super().__init__(f"tensor {name!r}: config implies shape {expected}, file has {found}")
        self.name = name
        self.expected = expected
        self.found = found


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    named = [(k, ckpt.tensors[k]) for k in sorted(ckpt.tensors)]
    named += [(VELOCITY_PREFIX + k, ckpt.velocities[k]) for k in sorted(ckpt.velocities)]
    directory, chunks, offset = [], [], 0
    for name, array in named:
        raw = np.ascontiguousarray(array, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(array.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "schedule": ckpt.schedule.to_dict(),
        "epoch": ckpt.epoch,
        "history": [r.to_dict() for r in ckpt.history],
        "label_names": list(ckpt.label_names),
        "bn_initialized": dict(sorted(ckpt.bn_initialized.items())),
        "tensors": directory,
        "payload_bytes": len(payload),
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(text)) + text + payload + _checksum(payload)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 8:
        raise TruncatedCheckpointError("file shorter than its header")
    if data[:len(MAGIC)] != MAGIC:
        if data[:6] == MAGIC[:6]:
            raise VersionMismatchError(f"unsupported checkpoint magic {data[:7]!r}")
        raise CheckpointError("not a TF-CRNN checkpoint")
    pos = len(MAGIC)
    (manifest_len,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if pos + manifest_len > len(data):
        raise TruncatedCheckpointError("manifest runs past end of file")
    try:
        manifest = json.loads(data[pos:pos + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    pos += manifest_len
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {manifest.get('format_version')}, "
                                   f"this build reads {FORMAT_VERSION}")
    size = manifest["payload_bytes"]
    if pos + size + 8 > len(data):
        raise TruncatedCheckpointError(f"payload needs {size + 8} bytes, {len(data) - pos} present")
    payload = data[pos:pos + size]
    if _checksum(payload) != data[pos + size:pos + size + 8]:
        raise ChecksumError("payload checksum mismatch")

    model_config = ModelConfig.from_dict(manifest["model_config"])
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if array.size != count:
            raise CheckpointShapeError(entry["name"], tuple(entry["shape"]), (array.size,))
        arrays[entry["name"]] = array.reshape(entry["shape"])
    velocities = {k[len(VELOCITY_PREFIX):]: v for k, v in arrays.items() if k.startswith(VELOCITY_PREFIX)}
    tensors = {k: v for k, v in arrays.items() if not k.startswith(VELOCITY_PREFIX)}
    _validate_shapes(model_config, tensors, velocities)
    return Checkpoint(
        model_config=model_config,
        train_config=TrainConfig(**manifest["train_config"]),
        tensors=tensors,
        bn_initialized={k: bool(v) for k, v in manifest["bn_initialized"].items()},
        velocities=velocities,
        schedule=ScheduleState(**manifest["schedule"]),
        epoch=manifest["epoch"],
        history=[EpochRecord(**r) for r in manifest["history"]],
        label_names=list(manifest["label_names"]),
    )


def _validate_shapes(config: ModelConfig, tensors: dict, velocities: dict) -> None:
    reference = TFCRNN(config).state_arrays()
    missing = sorted(set(reference) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing)}")
    for name, array in tensors.items():
        if name not in reference:
            raise CheckpointError(f"unexpected tensor {name!r}")
        if array.shape != reference[name].shape:
            raise CheckpointShapeError(name, reference[name].shape, array.shape)
    for name, array in velocities.items():
        if name not in reference or array.shape != reference[name].shape:
            raise CheckpointShapeError(VELOCITY_PREFIX + name,
                                       reference[name].shape if name in reference else (), array.shape)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    data = to_bytes(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
