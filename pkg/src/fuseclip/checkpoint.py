"""Binary checkpoint container: named, checksummed sections.

A checkpoint is a little-endian file holding one JSON metadata section and
any number of float array sections. Every section carries a SHA-256 digest
of its payload, so truncation or corruption is detected before any state
is handed back. Writing the same state twice produces identical bytes:
sections are emitted in a fixed order and the metadata JSON is canonical.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CompatibilityError

Array = np.ndarray

MAGIC = b"FUSECLIP-CK" + b"\x00" * 5
VERSION = 1

_META_SECTION = "meta"
_KIND_JSON = 0
_KIND_ARRAY = 1

_HEADER = struct.Struct("<16sII")
_SECTION_HEAD = struct.Struct("<HBQ")


def _array_payload(arr: Array) -> bytes:
    arr = np.ascontiguousarray(arr)
    dtype = arr.dtype.str.encode("ascii")
    head = struct.pack("<B", len(dtype)) + dtype
    head += struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def _parse_array(payload: bytes, name: str) -> Array:
    try:
        (dlen,) = struct.unpack_from("<B", payload, 0)
        dtype = np.dtype(payload[1 : 1 + dlen].decode("ascii"))
        (ndim,) = struct.unpack_from("<B", payload, 1 + dlen)
        shape = struct.unpack_from(f"<{ndim}Q", payload, 2 + dlen)
        data = payload[2 + dlen + 8 * ndim :]
        arr = np.frombuffer(data, dtype=dtype).reshape(shape)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed array section {name!r}: {exc}") from exc
    return arr.copy()


def save_checkpoint(path: str | Path, meta: dict, arrays: dict[str, Array]) -> None:
    """Write metadata and arrays; replaces the target file atomically."""
    path = Path(path)
    sections: list[tuple[str, int, bytes]] = [
        (
            _META_SECTION,
            _KIND_JSON,
            json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8"),
        )
    ]
    for name in sorted(arrays):
        if name == _META_SECTION:
            raise CheckpointError(f"array name {name!r} collides with metadata")
        sections.append((name, _KIND_ARRAY, _array_payload(arrays[name])))

    blob = bytearray(_HEADER.pack(MAGIC, VERSION, len(sections)))
    for name, kind, payload in sections:
        encoded = name.encode("utf-8")
        blob += _SECTION_HEAD.pack(len(encoded), kind, len(payload))
        blob += encoded
        blob += hashlib.sha256(payload).digest()
        blob += payload

    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, Array]]:
    """Read a checkpoint back; verifies magic, version, and every digest."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: file shorter than the header")
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CompatibilityError(
            f"{path}: format version {version}, this build reads {VERSION}"
        )

    meta: dict | None = None
    arrays: dict[str, Array] = {}
    offset = _HEADER.size
    for _ in range(count):
        if offset + _SECTION_HEAD.size > len(blob):
            raise CheckpointError(f"{path}: truncated section header")
        name_len, kind, payload_len = _SECTION_HEAD.unpack_from(blob, offset)
        offset += _SECTION_HEAD.size
        end = offset + name_len + 32 + payload_len
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated section body")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        digest = blob[offset : offset + 32]
        offset += 32
        payload = blob[offset : offset + payload_len]
        offset += payload_len
        if hashlib.sha256(payload).digest() != digest:
            raise CheckpointError(f"{path}: checksum mismatch in section {name!r}")
        if kind == _KIND_JSON:
            meta = json.loads(payload.decode("utf-8"))
        elif kind == _KIND_ARRAY:
            arrays[name] = _parse_array(payload, name)
        else:
            raise CheckpointError(f"{path}: unknown section kind {kind}")
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    if meta is None:
        raise CheckpointError(f"{path}: missing metadata section")
    return meta, arrays
