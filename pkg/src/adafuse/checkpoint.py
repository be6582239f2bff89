"""Binary checkpoint format for fusion parameters.

Layout (all integers little-endian)::

    b"ADFS" | version u32 | meta_len u32 | meta (UTF-8 JSON) | tensors | crc32 u32

``meta`` holds the FusionConfig fields and an ordered tensor manifest
(``[{"name": ..., "shape": [...]}, ...]``). Tensors follow as raw float32 in
manifest order. The CRC32 covers every byte before it.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from .exceptions import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .model import FusionConfig, FusionParams, tensor_shapes

MAGIC = b"ADFS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_CRC = struct.Struct("<I")


def encode_checkpoint(params: FusionParams) -> bytes:
    manifest = [{"name": n, "shape": list(t.shape)} for n, t in params.tensors.items()]
    meta = {"config": params.config.to_dict(), "tensors": manifest}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_bytes)), meta_bytes]
    for t in params.tensors.values():
        chunks.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    payload = b"".join(chunks)
    return payload + _CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes) -> tuple[FusionParams, FusionConfig]:
    if len(blob) < _HEADER.size:
        raise CheckpointTruncatedError("checkpoint shorter than its header")
    magic, version, meta_len = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not an ADFS checkpoint")
    if version > FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is newer than supported {FORMAT_VERSION}")
    if version < 1:
        raise CheckpointVersionError(f"invalid checkpoint format version {version}")

    offset = _HEADER.size
    if len(blob) < offset + meta_len + _CRC.size:
        raise CheckpointTruncatedError("checkpoint truncated inside metadata")
    try:
        meta = json.loads(blob[offset:offset + meta_len].decode("utf-8"))
        config = FusionConfig.from_dict(meta["config"])
        manifest = [(m["name"], tuple(m["shape"])) for m in meta["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        # a flipped byte in the metadata usually lands here before the CRC is reached
        payload_ok = _crc_ok(blob)
        cls = CheckpointError if payload_ok else CheckpointChecksumError
        raise cls(f"unreadable checkpoint metadata: {exc}") from exc
    offset += meta_len

    expected_bytes = sum(4 * int(np.prod(shape)) for _, shape in manifest)
    if len(blob) < offset + expected_bytes + _CRC.size:
        raise CheckpointTruncatedError(
            f"checkpoint truncated: need {offset + expected_bytes + _CRC.size} bytes, have {len(blob)}"
        )
    if len(blob) > offset + expected_bytes + _CRC.size:
        raise CheckpointError("trailing bytes after checkpoint checksum")
    if not _crc_ok(blob):
        raise CheckpointChecksumError("checkpoint CRC32 mismatch")

    if manifest != list(tensor_shapes(config).items()):
        raise CheckpointError("tensor manifest does not match the stored config")
    tensors = {}
    for name, shape in manifest:
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        tensors[name] = arr.astype(np.float32)
        offset += 4 * n
    return FusionParams(config, tensors), config


def _crc_ok(blob: bytes) -> bool:
    if len(blob) < _CRC.size:
        return False
    (stored,) = _CRC.unpack_from(blob, len(blob) - _CRC.size)
    return (zlib.crc32(blob[:-_CRC.size]) & 0xFFFFFFFF) == stored


def save_checkpoint(params: FusionParams, path) -> None:
    blob = encode_checkpoint(params)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[FusionParams, FusionConfig]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
