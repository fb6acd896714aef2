"""8-bit PNG (gray/RGB, non-interlaced) and binary PPM/PGM codecs.

Images cross this boundary as float32 arrays shaped (c, h, w) in [-1, 1];
8-bit values map linearly, ``v / 127.5 - 1``.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageIOError(OSError):
    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = str(path)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(c, h, w) floats in [-1, 1] -> (h, w, c) uint8, clamping out-of-range values."""
    img = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    u8 = np.rint((img + 1.0) * 127.5).astype(np.uint8)
    return np.ascontiguousarray(u8.transpose(1, 2, 0))


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """(h, w, c) uint8 -> (c, h, w) float32 in [-1, 1]."""
    return (arr.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).transpose(2, 0, 1).copy()


# ---------------------------------------------------------------------- PNG

def _chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def encode_png(pixels: np.ndarray) -> bytes:
    """(h, w, c) uint8 with c in {1, 3} -> PNG bytes (filter type 0 on every row)."""
    h, w, c = pixels.shape
    color_type = {1: 0, 3: 2}[c]
    raw = np.zeros((h, 1 + w * c), dtype=np.uint8)
    raw[:, 1:] = pixels.reshape(h, w * c)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return (PNG_SIGNATURE + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib.compress(raw.tobytes(), 6)) + _chunk(b"IEND", b""))


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = np.abs(p - a), np.abs(p - b), np.abs(p - c)
    return np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))


def _unfilter(data: bytes, h: int, w: int, bpp: int, path) -> np.ndarray:
    stride = w * bpp
    if len(data) != h * (stride + 1):
        raise ImageIOError(path, f"image data has {len(data)} bytes, expected {h * (stride + 1)}")
    rows = np.frombuffer(data, dtype=np.uint8).reshape(h, stride + 1)
    out = np.zeros((h, stride), dtype=np.int32)
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(h):
        ftype = rows[y, 0]
        cur = rows[y, 1:].astype(np.int32)
        if ftype == 0:
            line = cur
        elif ftype == 2:
            line = (cur + prev) & 0xFF
        elif ftype in (1, 3, 4):
            # left-dependent filters run byte by byte
            line = np.zeros(stride, dtype=np.int32)
            for x in range(stride):
                left = line[x - bpp] if x >= bpp else 0
                if ftype == 1:
                    pred = left
                elif ftype == 3:
                    pred = (left + prev[x]) >> 1
                else:
                    upleft = prev[x - bpp] if x >= bpp else 0
                    pred = int(_paeth(np.int32(left), np.int32(prev[x]), np.int32(upleft)))
                line[x] = (cur[x] + pred) & 0xFF
        else:
            raise ImageIOError(path, f"unknown PNG filter type {ftype} on row {y}")
        out[y] = line
        prev = line
    return out.astype(np.uint8).reshape(h, w, bpp)


def decode_png(blob: bytes, path="<bytes>") -> np.ndarray:
    """PNG bytes -> (h, w, c) uint8.  8-bit gray or RGB, no interlace."""
    if blob[:8] != PNG_SIGNATURE:
        raise ImageIOError(path, "not a PNG file (bad signature)")
    pos = 8
    header = None
    idat = []
    while True:
        if pos + 8 > len(blob):
            raise ImageIOError(path, "truncated PNG (missing IEND)")
        length, tag = struct.unpack(">I4s", blob[pos : pos + 8])
        payload = blob[pos + 8 : pos + 8 + length]
        crc_bytes = blob[pos + 8 + length : pos + 12 + length]
        if len(payload) != length or len(crc_bytes) != 4:
            raise ImageIOError(path, f"truncated PNG chunk {tag!r}")
        if struct.unpack(">I", crc_bytes)[0] != zlib.crc32(tag + payload) & 0xFFFFFFFF:
            raise ImageIOError(path, f"CRC mismatch in chunk {tag!r}")
        pos += 12 + length
        if tag == b"IHDR":
            if length != 13:
                raise ImageIOError(path, "malformed IHDR")
            header = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat.append(payload)
        elif tag == b"IEND":
            break
        elif header is None:
            raise ImageIOError(path, "IHDR must be the first chunk")
    if header is None:
        raise ImageIOError(path, "missing IHDR")
    w, h, depth, color, comp, filt, interlace = header
    if depth != 8 or color not in (0, 2) or comp or filt or interlace:
        raise ImageIOError(
            path, f"unsupported PNG (bit depth {depth}, color type {color}, interlace "
                  f"{interlace}); only 8-bit gray/RGB non-interlaced")
    if w == 0 or h == 0:
        raise ImageIOError(path, "empty image")
    try:
        data = zlib.decompress(b"".join(idat))
    except zlib.error as e:
        raise ImageIOError(path, f"corrupt image data: {e}") from None
    return _unfilter(data, h, w, 1 if color == 0 else 3, path)


# ---------------------------------------------------------------------- PPM

def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w, c = pixels.shape
    magic = {1: b"P5", 3: b"P6"}[c]
    return magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes()


def decode_ppm(blob: bytes, path="<bytes>") -> np.ndarray:
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageIOError(path, "not a binary PPM/PGM file")
    channels = 3 if magic == b"P6" else 1
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageIOError(path, "malformed PPM header")
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace byte before the raster
    w, h, maxval = fields
    if maxval != 255:
        raise ImageIOError(path, f"unsupported maxval {maxval}; only 8-bit PPM")
    need = w * h * channels
    raster = blob[pos : pos + need]
    if len(raster) != need:
        raise ImageIOError(path, f"truncated PPM raster ({len(raster)} of {need} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels).copy()


# ------------------------------------------------------------------ file API

def load_image(path) -> np.ndarray:
    """Read a PNG or binary PPM/PGM as (c, h, w) float32 in [-1, 1]."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ImageIOError(path, e.strerror or str(e)) from None
    if blob[:8] == PNG_SIGNATURE or path.suffix.lower() == ".png":
        pixels = decode_png(blob, path)
    elif blob[:2] in (b"P5", b"P6") or path.suffix.lower() in (".ppm", ".pgm"):
        pixels = decode_ppm(blob, path)
    else:
        raise ImageIOError(path, "unsupported image format")
    return from_uint8(pixels)


def save_image(img: np.ndarray, path) -> None:
    """Write (c, h, w) floats in [-1, 1] as PNG or PPM, chosen by suffix."""
    path = Path(path)
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ImageIOError(path, f"expected (1|3, h, w) image, got shape {img.shape}")
    pixels = to_uint8(img)
    suffix = path.suffix.lower()
    if suffix == ".png":
        blob = encode_png(pixels)
    elif suffix in (".ppm", ".pgm"):
        blob = encode_ppm(pixels)
    else:
        raise ImageIOError(path, f"unsupported output format {suffix!r}")
    path.write_bytes(blob)
