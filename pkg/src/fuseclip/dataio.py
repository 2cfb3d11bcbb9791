"""Binary persistence for sample datasets.

Layout (little-endian throughout):

    bytes 0..15   magic "FUSECLIP-DS" + 5 NUL bytes
    u32           format version (1)
    u32 x 4       d_x, d_face, caption length, slot count
    u32           flags (bit 0: guided dataset)
    u32           reserved (0)
    u64 x 2       world seed, sample seed
    u64           record count
    records       packed: x0 f64[d_x], reference f64[d_face],
                  id_index u16, slots u16[K], caption u16[L]

Reading back a written dataset reproduces it bitwise.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .world import Dataset

MAGIC = b"FUSECLIP-DS" + b"\x00" * 5
VERSION = 1
_HEADER = struct.Struct("<16sIIIIIIIQQQ")
_FLAG_GUIDED = 1


def _record_dtype(d_x: int, d_face: int, caption_len: int, n_slots: int) -> np.dtype:
    return np.dtype(
        [
            ("x0", "<f8", (d_x,)),
            ("reference", "<f8", (d_face,)),
            ("id_index", "<u2"),
            ("slots", "<u2", (n_slots,)),
            ("caption", "<u2", (caption_len,)),
        ]
    )


def write_dataset(path: str | Path, dataset: Dataset) -> None:
    n, d_x = dataset.x0.shape
    d_face = dataset.reference.shape[1]
    caption_len = dataset.captions.shape[1]
    n_slots = dataset.slots.shape[1]
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        d_x,
        d_face,
        caption_len,
        n_slots,
        _FLAG_GUIDED if dataset.guided else 0,
        0,
        dataset.world_seed,
        dataset.sample_seed,
        n,
    )
    records = np.empty(n, dtype=_record_dtype(d_x, d_face, caption_len, n_slots))
    records["x0"] = dataset.x0
    records["reference"] = dataset.reference
    records["id_index"] = dataset.id_index
    records["slots"] = dataset.slots
    records["caption"] = dataset.captions
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def read_dataset(path: str | Path) -> Dataset:
    with open(path, "rb") as fh:
        raw_header = fh.read(_HEADER.size)
        if len(raw_header) < _HEADER.size:
            raise DataFormatError(f"{path}: truncated header")
        (
            magic,
            version,
            d_x,
            d_face,
            caption_len,
            n_slots,
            flags,
            _reserved,
            world_seed,
            sample_seed,
            count,
        ) = _HEADER.unpack(raw_header)
        if magic != MAGIC:
            raise DataFormatError(f"{path}: not a dataset file")
        if version != VERSION:
            raise DataFormatError(f"{path}: unsupported version {version}")
        dtype = _record_dtype(d_x, d_face, caption_len, n_slots)
        body = fh.read()
    if len(body) != count * dtype.itemsize:
        raise DataFormatError(
            f"{path}: expected {count * dtype.itemsize} record bytes, "
            f"found {len(body)}"
        )
    records = np.frombuffer(body, dtype=dtype)
    return Dataset(
        x0=records["x0"].astype(np.float64, copy=True),
        reference=records["reference"].astype(np.float64, copy=True),
        captions=records["caption"].copy(),
        id_index=records["id_index"].copy(),
        slots=records["slots"].copy(),
        guided=bool(flags & _FLAG_GUIDED),
        world_seed=int(world_seed),
        sample_seed=int(sample_seed),
    )
