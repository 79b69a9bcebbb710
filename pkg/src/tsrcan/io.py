"""On-disk formats: MSRT tensor files, 16-bit PGM mosaics, 8-bit PPM images.

MSRT layout (all little-endian)::

    b"MSRT" | u8 version (=1) | u8 ndim | ndim x u32 dims | f32 payload, row-major
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"MSRT"
VERSION = 1

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


def encode_msrt(array) -> bytes:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise FormatError("MSRT supports at most 255 dimensions")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode_msrt(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError("not an MSRT file (bad magic)")
    version, ndim = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported MSRT version {version}")
    off = 6 + 4 * ndim
    if len(buf) < off:
        raise FormatError("truncated MSRT header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 6)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise FormatError(f"MSRT payload has {len(buf) - off} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(dims)


def write_msrt(path: PathLike, array) -> None:
    Path(path).write_bytes(encode_msrt(array))


def read_msrt(path: PathLike) -> np.ndarray:
    return decode_msrt(Path(path).read_bytes())


def _read_pnm_header(f: BinaryIO, magic: bytes):
    def token():
        out = b""
        while True:
            ch = f.read(1)
            if not ch:
                raise FormatError("truncated PNM header")
            if ch == b"#":
                f.readline()
                continue
            if ch.isspace():
                if out:
                    return out
                continue
            out += ch

    if token() != magic:
        raise FormatError(f"expected {magic.decode()} image")
    width, height, maxval = int(token()), int(token()), int(token())
    return width, height, maxval


def write_pgm16(path: PathLike, image) -> None:
    """Write a single-plane image in [0, 1] as 16-bit binary PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got shape {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode())
        f.write(q.tobytes())


def read_pgm16(path: PathLike) -> np.ndarray:
    """Read a binary PGM (8 or 16 bit) into float32 in [0, 1]."""
    with open(path, "rb") as f:
        w, h, maxval = _read_pnm_header(f, b"P5")
        dtype = ">u2" if maxval > 255 else "u1"
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h)
    return (data.reshape(h, w).astype(np.float64) / maxval).astype(np.float32)


def write_ppm(path: PathLike, rgb) -> None:
    """Write a (3,H,W) image in [0, 1] as binary PPM, maxval 255."""
    img = np.asarray(rgb, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"PPM needs a (3,H,W) image, got shape {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[2]} {img.shape[1]}\n255\n".encode())
        f.write(np.ascontiguousarray(q).tobytes())


def read_ppm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        w, h, maxval = _read_pnm_header(f, b"P6")
        if maxval > 255:
            raise FormatError("only 8-bit PPM is supported")
        data = np.frombuffer(f.read(), dtype=np.uint8, count=3 * w * h)
    return (data.reshape(h, w, 3).transpose(2, 0, 1) / maxval).astype(np.float32)
