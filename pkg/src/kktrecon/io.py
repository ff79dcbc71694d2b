"""Binary container for checkpoints and reconstruction states.

Layout (all integers little-endian)::

    magic        8 bytes   b"KKTRECON"
    version      u16       currently 1
    precision    u8        4 or 8 (bytes per scalar)
    kind         u8        0 = MLP checkpoint, 1 = reconstruction state
    meta_len     u32       length of the UTF-8 JSON metadata that follows
    meta         meta_len bytes ("" for checkpoints)
    n_arrays     u32       for checkpoints, the layer count
    per array:   rows u64, cols u64, rows*cols raw scalars (row-major)
    checksum     u64       BLAKE2b-64 digest of every preceding byte

Readers reject any file whose trailing checksum does not match.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .mlp import MlpParams

MAGIC = b"KKTRECON"
VERSION = 1
KIND_CHECKPOINT = 0
KIND_RECON_STATE = 1

_HEADER = struct.Struct("<8sHBBI")


class ChecksumError(ValueError):
    pass


class FormatError(ValueError):
    pass


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def encode(arrays, kind: int, precision: int = 64, meta: dict | None = None) -> bytes:
    dtype = np.dtype("<f8" if precision == 64 else "<f4")
    meta_bytes = b"" if meta is None else json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, VERSION, precision // 8, kind, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(arrays)))
    for a in arrays:
        a = np.asarray(a, dtype=dtype)
        if a.ndim == 1:
            a = a[None, :]
        if a.ndim != 2:
            raise ValueError(f"can only store 1-D or 2-D arrays, got {a.shape}")
        parts.append(struct.pack("<QQ", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    payload = b"".join(parts)
    return payload + _digest(payload)


def decode(blob: bytes) -> tuple[int, int, dict | None, list[np.ndarray]]:
    """Return ``(kind, precision_bits, meta, arrays)``."""
    if len(blob) < _HEADER.size + 12:
        raise FormatError("file too short")
    payload, checksum = blob[:-8], blob[-8:]
    if _digest(payload) != checksum:
        raise ChecksumError("checksum mismatch: file is corrupt or truncated")
    magic, version, width, kind, meta_len = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if width not in (4, 8):
        raise FormatError(f"bad precision flag {width}")
    pos = _HEADER.size
    meta = json.loads(payload[pos:pos + meta_len]) if meta_len else None
    pos += meta_len
    (count,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    dtype = np.dtype("<f8" if width == 8 else "<f4")
    arrays = []
    for _ in range(count):
        rows, cols = struct.unpack_from("<QQ", payload, pos)
        pos += 16
        nbytes = rows * cols * width
        if pos + nbytes > len(payload):
            raise FormatError("array extends past end of file")
        arrays.append(np.frombuffer(payload, dtype=dtype, count=rows * cols, offset=pos).reshape(rows, cols).copy())
        pos += nbytes
    if pos != len(payload):
        raise FormatError("trailing bytes after last array")
    return kind, width * 8, meta, arrays


def save_params(params: MlpParams, path) -> None:
    Path(path).write_bytes(encode(params.layer_weights, KIND_CHECKPOINT, params.precision))


def load_params(path) -> MlpParams:
    kind, precision, _, arrays = decode(Path(path).read_bytes())
    if kind != KIND_CHECKPOINT:
        raise FormatError(f"{path} is not an MLP checkpoint (kind={kind})")
    return MlpParams(arrays, precision)
