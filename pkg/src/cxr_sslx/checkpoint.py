"""Checkpoint envelope: the unit of hand-off between training stages.

Binary layout (all integers little-endian uint32, version 1):

    magic           8 bytes, b"CXRSSLX\\x00"
    format_version  uint32
    stage           uint32 length + UTF-8 bytes
    epoch           uint32 (completed epochs)
    config          uint32 length + UTF-8 bytes (canonical key = value text)
    blob_count      uint32
    directory       per blob: name (uint32 length + UTF-8),
                    ndim (uint32), dims (ndim x uint32)
    data            per blob, directory order: little-endian float32, C order

Every blob is stored as 32-bit floats; integer-valued blobs (normalization
step counters) are cast on save and cast back to the consuming module's
dtype on load. Saving is atomic (write to a temp file, then rename), and
save -> load -> save reproduces the file byte for byte.
"""

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cxr_sslx.config import TrainConfig, format_config, parse_config
from cxr_sslx.errors import CheckpointError, ConfigError
from cxr_sslx.ssl_core import ParameterSet

MAGIC = b"CXRSSLX\x00"
FORMAT_VERSION = 1

STAGE_SSL = "ssl_pretrained"
STAGE_FINETUNED = "finetuned"
STAGE_EXTERNAL = "external_backbone"
STAGES = (STAGE_SSL, STAGE_FINETUNED, STAGE_EXTERNAL)


@dataclass
class CheckpointEnvelope:
    stage: str
    config: TrainConfig
    epoch: int
    blobs: ParameterSet
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epoch < 0:
            raise CheckpointError(f"epoch must be >= 0, got {self.epoch}")

    def save(self, path) -> Path:
        path = Path(path)
        payload = _encode(self)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)
        return path


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _encode(env: CheckpointEnvelope) -> bytes:
    parts = [MAGIC, struct.pack("<I", env.format_version), _pack_str(env.stage),
             struct.pack("<I", env.epoch), _pack_str(format_config(env.config))]
    names = env.blobs.names()
    parts.append(struct.pack("<I", len(names)))
    arrays = []
    for name in names:
        arr = np.asarray(env.blobs.blobs[name], dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        arrays.append(arr)
    parts.extend(arr.tobytes(order="C") for arr in arrays)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint file: {self.source}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        length = self.u32()
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(
                f"corrupt string in checkpoint {self.source}") from exc


def load_checkpoint(path) -> CheckpointEnvelope:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint file not found: {path}")
    reader = _Reader(path.read_bytes(), str(path))
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version} in {path}")
    stage = reader.string()
    epoch = reader.u32()
    config_text = reader.string()
    try:
        config, _ = parse_config(config_text)
    except ConfigError as exc:
        raise CheckpointError(f"corrupt config block in {path}: {exc}") from exc
    count = reader.u32()
    directory = []
    for _ in range(count):
        name = reader.string()
        ndim = reader.u32()
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        directory.append((name, shape))
    blobs = {}
    for name, shape in directory:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = reader.take(4 * size)
        blobs[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if reader.offset != len(reader.data):
        raise CheckpointError(f"{path} has {len(reader.data) - reader.offset} "
                              "trailing bytes")
    return CheckpointEnvelope(stage=stage, config=config, epoch=epoch,
                              blobs=ParameterSet(blobs), format_version=version)
