"""Binary checkpoint container.

Layout: ``b"ADMG"``, format version (u32 LE), header length (u32 LE), a
UTF-8 JSON header, the tensor payload as little-endian float32, then a
CRC32 (u32 LE) of every preceding byte. The header lists each tensor's
name, shape and byte offset into the payload, plus free-form metadata.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointChecksumError, CheckpointError, CheckpointTruncatedError, CheckpointVersionError

MAGIC = b"ADMG"
VERSION = 1


def encode(tensors: dict[str, torch.Tensor | np.ndarray], meta: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        value = tensors[name]
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.asarray(value, dtype="<f4")  # tobytes() emits C order; keeps 0-d shapes
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 12:
        raise CheckpointTruncatedError("checkpoint shorter than its fixed header")
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    if len(blob) < 12 + hlen + 4:
        raise CheckpointTruncatedError("checkpoint header truncated")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        crc_ok = zlib.crc32(blob[:-4]) & 0xFFFFFFFF == struct.unpack("<I", blob[-4:])[0]
        raise (CheckpointError if crc_ok else CheckpointChecksumError)("corrupt checkpoint header") from None
    payload_len = sum(e["nbytes"] for e in header["tensors"])
    expected = 12 + hlen + payload_len + 4
    if len(blob) < expected:
        raise CheckpointTruncatedError(f"checkpoint has {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise CheckpointError("trailing bytes after checkpoint payload")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointChecksumError("checkpoint CRC32 mismatch")
    base = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(blob[start : start + e["nbytes"]], dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = arr.copy()
    return tensors, header["meta"]


def save_checkpoint(path, tensors: dict, meta: dict) -> None:
    Path(path).write_bytes(encode(tensors, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
