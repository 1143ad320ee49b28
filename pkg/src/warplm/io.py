"""Binary VOL3 / DSP3 containers.

Layout: 4 magic bytes, ``nx ny nz`` as little-endian uint32, then float32
little-endian payload with x varying fastest.  DSP3 stores the three
displacement components innermost.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

VOL_MAGIC = b"VOL3"
DSP_MAGIC = b"DSP3"
_HEADER = struct.Struct("<4s3I")


class FormatError(ValueError):
    """Raised when a VOL3/DSP3 file cannot be decoded."""


def _encode(magic, dims, payload: np.ndarray) -> bytes:
    return _HEADER.pack(magic, *dims) + payload.astype("<f4").tobytes()


def _decode(buf: bytes, magic: bytes, ncomp: int):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header")
    got, nx, ny, nz = _HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, found {got!r}")
    if min(nx, ny, nz) < 1:
        raise FormatError(f"invalid dimensions {(nx, ny, nz)}")
    count = nx * ny * nz * ncomp
    body = buf[_HEADER.size:]
    if len(body) != 4 * count:
        raise FormatError(f"payload has {len(body)} bytes, expected {4 * count}")
    data = np.frombuffer(body, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise FormatError("payload contains non-finite values")
    return (nx, ny, nz), data


def volume_to_bytes(vol: np.ndarray) -> bytes:
    nx, ny, nz = vol.shape
    # x-fastest == Fortran order over (x, y, z)
    return _encode(VOL_MAGIC, (nx, ny, nz), np.asarray(vol).ravel(order="F"))


def volume_from_bytes(buf: bytes) -> np.ndarray:
    dims, data = _decode(buf, VOL_MAGIC, 1)
    return data.reshape(dims, order="F")


def field_to_bytes(u: np.ndarray) -> bytes:
    nx, ny, nz, _ = u.shape
    payload = np.asarray(u).transpose(2, 1, 0, 3).ravel()
    return _encode(DSP_MAGIC, (nx, ny, nz), payload)


def field_from_bytes(buf: bytes) -> np.ndarray:
    (nx, ny, nz), data = _decode(buf, DSP_MAGIC, 3)
    return data.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3).copy()


def write_volume(path, vol):
    Path(path).write_bytes(volume_to_bytes(vol))


def read_volume(path) -> np.ndarray:
    return volume_from_bytes(Path(path).read_bytes())


def write_field(path, u):
    Path(path).write_bytes(field_to_bytes(u))


def read_field(path) -> np.ndarray:
    return field_from_bytes(Path(path).read_bytes())
