"""Flat binary tensor container (``.vitg``).

Layout, all integers little-endian::

    b"VITG"  u32 version  u32 count
    count x { u32 name_len, name (utf-8), u8 dtype, u32 ndim, ndim x u32 dim, payload }
    u32 crc32 of everything before it

dtype tags: 1 float32, 2 float64, 3 uint64.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"VITG"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<u8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("uint64"): 3}


class CheckpointError(ValueError):
    pass


def encode_container(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_container(blob: bytes, source="<bytes>") -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic bytes {blob[:4]!r}, not a VITG checkpoint")
    if len(blob) < 16:
        raise CheckpointError(f"{source}: truncated checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: format version {version}, expected {VERSION}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            tag, ndim = struct.unpack_from("<BI", blob, pos)
            pos += 5
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            if tag not in _DTYPES:
                raise CheckpointError(f"{source}: {name}: unknown dtype tag {tag}")
            dt = _DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise CheckpointError(f"{source}: truncated checkpoint in tensor {name!r}")
            out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize,
                                      offset=pos).reshape(shape).astype(dt.newbyteorder("="))
            pos += nbytes
    except (struct.error, UnicodeDecodeError):
        raise CheckpointError(f"{source}: truncated or corrupt checkpoint") from None
    if pos != len(body):
        raise CheckpointError(f"{source}: truncated or trailing bytes after {count} tensors")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{source}: checksum mismatch")
    return out


def write_container(path, tensors: dict[str, np.ndarray]) -> None:
    """Write via a sibling temp file so a crash never leaves a torn checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_container(tensors))
    tmp.replace(path)


def read_container(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror or e}") from None
    return decode_container(blob, path)
