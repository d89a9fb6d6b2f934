"""Tensor plumbing: float32 arrays, summed-area tables and the TNSR file format.

A "tensor" throughout the package is a C-contiguous ``numpy.ndarray`` of
float32 with at most four axes. Feature maps are laid out ``(H, W, C)`` or
``(N, H, W, C)`` with channels innermost.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError

MAX_AXES = 4
NORM_EPS = 1e-12

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
DTYPE_F32 = 0
# Extension: raw bytes, used for text entries (configs, label maps) inside CKPT files.
DTYPE_U8 = 1
_HEADER = struct.Struct("<4sBBB3x")
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}


def as_tensor(data, dims=None) -> np.ndarray:
    """Copy ``data`` into a finite float32 tensor, optionally reshaped to ``dims``."""
    arr = np.array(data, dtype=np.float32, order="C")
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if any(d < 1 for d in dims):
            raise InvalidArgumentError(f"dims must be positive, got {dims}")
        if int(np.prod(dims)) != arr.size:
            raise InvalidArgumentError(f"{arr.size} values do not fill dims {dims}")
        arr = arr.reshape(dims)
    if arr.ndim > MAX_AXES:
        raise InvalidArgumentError(f"at most {MAX_AXES} axes supported, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("tensor contains non-finite values")
    return arr


@dataclass(frozen=True)
class SummedAreaTable:
    """Per-channel prefix sums with a zero top row and left column.

    ``values`` has shape ``(..., H + 1, W + 1, C)`` in float64.
    """

    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[-3] - 1

    @property
    def width(self) -> int:
        return self.values.shape[-2] - 1

    @property
    def channels(self) -> int:
        return self.values.shape[-1]


def sat_build(fmap: np.ndarray) -> SummedAreaTable:
    """Build the summed-area table of an ``(H, W, C)`` map (or a batch of them)."""
    fmap = np.asarray(fmap)
    if fmap.ndim not in (3, 4) or min(fmap.shape) < 1:
        raise InvalidArgumentError(f"expected (H, W, C) or (N, H, W, C) map, got shape {fmap.shape}")
    lead = fmap.shape[:-3]
    h, w, c = fmap.shape[-3:]
    sat = np.zeros(lead + (h + 1, w + 1, c), dtype=np.float64)
    acc = np.cumsum(fmap.astype(np.float64), axis=-3)
    np.cumsum(acc, axis=-2, out=sat[..., 1:, 1:, :])
    return SummedAreaTable(sat)


def sat_window_sum(sat: SummedAreaTable, top: int, left: int, h: int, w: int) -> np.ndarray:
    """Sum of the ``h x w`` window at ``(top, left)``, per channel, in four lookups."""
    if h < 1 or w < 1 or top < 0 or left < 0 or top + h > sat.height or left + w > sat.width:
        raise InvalidArgumentError(
            f"window top={top} left={left} h={h} w={w} outside {sat.height}x{sat.width} map"
        )
    v = sat.values
    b, r = top + h, left + w
    return v[..., b, r, :] - v[..., top, r, :] - v[..., b, left, :] + v[..., top, left, :]


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` (last axis) to unit Euclidean norm; near-zero rows are returned as is."""
    v = np.asarray(v)
    norm = np.sqrt(np.sum(np.square(v, dtype=np.float64), axis=-1, keepdims=True))
    safe = np.where(norm > NORM_EPS, norm, 1.0)
    return (v / safe).astype(v.dtype if v.dtype.kind == "f" else np.float64)


# -- TNSR serialization ------------------------------------------------------


def encode_tnsr(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        dtype_code = DTYPE_U8
    else:
        dtype_code = DTYPE_F32
        arr = arr.astype("<f4", copy=False)
    if arr.ndim < 1 or arr.ndim > MAX_AXES:
        raise InvalidArgumentError(f"TNSR supports 1..{MAX_AXES} axes, got {arr.ndim}")
    header = _HEADER.pack(TNSR_MAGIC, TNSR_VERSION, dtype_code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + np.ascontiguousarray(arr).tobytes()


def decode_tnsr(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one TNSR blob starting at ``offset``; return the array and the end offset."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated TNSR header", offset)
    magic, version, dtype_code, ndim = _HEADER.unpack_from(buf, offset)
    if magic != TNSR_MAGIC:
        raise FormatError(f"bad TNSR magic {magic!r}", offset)
    if version != TNSR_VERSION:
        raise FormatError(f"unsupported TNSR version {version}", offset + 4)
    if dtype_code not in _DTYPES:
        raise FormatError(f"unsupported TNSR dtype {dtype_code}", offset + 5)
    if ndim < 1 or ndim > MAX_AXES:
        raise FormatError(f"TNSR ndim {ndim} outside 1..{MAX_AXES}", offset + 6)
    pos = offset + _HEADER.size
    if len(buf) - pos < 8 * ndim:
        raise FormatError("truncated TNSR dims", pos)
    dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
    if any(d < 1 for d in dims):
        raise FormatError(f"zero-length TNSR dimension in {dims}", pos)
    pos += 8 * ndim
    dtype = _DTYPES[dtype_code]
    nbytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"TNSR payload needs {nbytes} bytes, {len(buf) - pos} available", pos)
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    arr = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    return arr, pos + nbytes


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tnsr(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tnsr(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after TNSR payload", end)
    return arr


# -- CKPT container ----------------------------------------------------------

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


def encode_entries(entries: dict[str, np.ndarray]) -> bytes:
    """Serialize named tensors as a CKPT container with a trailing CRC32."""
    parts = [CKPT_MAGIC, bytes([CKPT_VERSION]), struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise InvalidArgumentError(f"entry name too long: {name[:40]}...")
        parts += [struct.pack("<H", len(raw)), raw, encode_tnsr(arr)]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_entries(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 13:
        raise FormatError("truncated CKPT file", 0)
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad CKPT magic {buf[:4]!r}", 0)
    if buf[4] != CKPT_VERSION:
        raise FormatError(f"unsupported CKPT version {buf[4]}", 4)
    body_end = len(buf) - 4
    (crc,) = struct.unpack_from("<I", buf, body_end)
    if zlib.crc32(buf[:body_end]) != crc:
        raise FormatError("CKPT checksum mismatch", body_end)
    (count,) = struct.unpack_from("<I", buf, 5)
    pos = 9
    entries: dict[str, np.ndarray] = {}
    body = buf[:body_end]
    for _ in range(count):
        if body_end - pos < 2:
            raise FormatError("truncated CKPT entry name length", pos)
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        if body_end - pos < n:
            raise FormatError("truncated CKPT entry name", pos)
        try:
            name = body[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry name is not UTF-8: {exc}", pos) from None
        if name in entries:
            raise FormatError(f"duplicate CKPT entry {name!r}", pos)
        pos += n
        entries[name], pos = decode_tnsr(body, pos)
    if pos != body_end:
        raise FormatError(f"{body_end - pos} unexpected bytes after last CKPT entry", pos)
    return entries


def text_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def entry_text(arr: np.ndarray) -> str:
    if arr.dtype != np.uint8 or arr.ndim != 1:
        raise FormatError("expected a byte entry for text payload")
    return arr.tobytes().decode("utf-8")
