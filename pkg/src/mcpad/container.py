"""MC16 planar image container.

A record is a 12-byte header followed by planar, row-major, little-endian
samples::

    offset  size  field
    0       4     magic  b"MC16"
    4       2     width        (u16 LE)
    6       2     height       (u16 LE)
    8       2     plane count  (u16 LE)
    10      2     bit depth    (u16 LE, 8 or 16)

A file may hold several records back to back. Raw captures use this to
store a 16-bit (depth, infrared) record followed by an 8-bit (R, G, B)
record for each frame; composites are a single 8-bit, 3-plane record.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mcpad.errors import CorruptFileError, DimensionMismatchError

MAGIC = b"MC16"
HEADER = struct.Struct("<4sHHHH")
_DTYPES = {8: np.dtype("u1"), 16: np.dtype("<u2")}


@dataclass(frozen=True)
class RawFrame:
    """One synchronized capture: 16-bit depth and infrared, 8-bit color."""

    depth: np.ndarray  # (H, W) uint16
    infrared: np.ndarray  # (H, W) uint16
    color: np.ndarray  # (H, W, 3) uint8, RGB

    def __post_init__(self):
        if self.depth.shape != self.infrared.shape or self.color.shape[:2] != self.depth.shape:
            raise DimensionMismatchError(
                f"unsynchronized channels: depth {self.depth.shape}, "
                f"infrared {self.infrared.shape}, color {self.color.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def encode_record(planes: np.ndarray, bit_depth: int) -> bytes:
    """Serialize a (P, H, W) or (H, W) array as one MC16 record."""
    if bit_depth not in _DTYPES:
        raise ValueError(f"bit depth must be 8 or 16, got {bit_depth}")
    arr = np.asarray(planes)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (P, H, W) planes, got shape {arr.shape}")
    n_planes, height, width = arr.shape
    if not (1 <= width <= 0xFFFF and 1 <= height <= 0xFFFF and 1 <= n_planes <= 0xFFFF):
        raise ValueError(f"dimensions out of range: {arr.shape}")
    limit = (1 << bit_depth) - 1
    if arr.size and (arr.min() < 0 or arr.max() > limit):
        raise ValueError(f"sample values exceed {bit_depth}-bit range")
    header = HEADER.pack(MAGIC, width, height, n_planes, bit_depth)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[bit_depth]).tobytes()


def decode_records(buf: bytes, source="<bytes>") -> list[tuple[np.ndarray, int]]:
    """Parse every record in ``buf`` into ``(planes, bit_depth)`` pairs."""
    records = []
    offset = 0
    if not buf:
        raise CorruptFileError(source, "empty file")
    while offset < len(buf):
        if len(buf) - offset < HEADER.size:
            raise CorruptFileError(source, f"truncated header at byte {offset}")
        magic, width, height, n_planes, bit_depth = HEADER.unpack_from(buf, offset)
        if magic != MAGIC:
            raise CorruptFileError(source, f"bad magic {magic!r} at byte {offset}")
        if bit_depth not in _DTYPES:
            raise CorruptFileError(source, f"unsupported bit depth {bit_depth}")
        if width < 1 or height < 1 or n_planes < 1:
            raise CorruptFileError(source, f"degenerate dimensions {width}x{height}x{n_planes}")
        offset += HEADER.size
        dtype = _DTYPES[bit_depth]
        nbytes = width * height * n_planes * dtype.itemsize
        if len(buf) - offset < nbytes:
            raise CorruptFileError(source, f"truncated payload: need {nbytes} bytes")
        data = np.frombuffer(buf, dtype=dtype, count=width * height * n_planes, offset=offset)
        records.append((data.reshape(n_planes, height, width).astype(dtype.newbyteorder("=")), bit_depth))
        offset += nbytes
    return records


def write_planes(path, planes: np.ndarray, bit_depth: int) -> None:
    Path(path).write_bytes(encode_record(planes, bit_depth))


def read_planes(path) -> tuple[np.ndarray, int]:
    """Read a single-record file."""
    records = decode_records(_read(path), path)
    if len(records) != 1:
        raise CorruptFileError(path, f"expected one record, found {len(records)}")
    return records[0]


def encode_frames(frames: list[RawFrame]) -> bytes:
    chunks = []
    for frame in frames:
        chunks.append(encode_record(np.stack([frame.depth, frame.infrared]), 16))
        chunks.append(encode_record(np.moveaxis(frame.color, -1, 0), 8))
    return b"".join(chunks)


def write_frames(path, frames: list[RawFrame]) -> None:
    Path(path).write_bytes(encode_frames(frames))


def read_frames(path) -> list[RawFrame]:
    """Read the raw frames of one sample (one or more capture instants)."""
    records = decode_records(_read(path), path)
    if len(records) % 2:
        raise CorruptFileError(path, "odd record count; each frame needs a 16-bit and an 8-bit record")
    frames = []
    for (raw, raw_depth), (rgb, rgb_depth) in zip(records[::2], records[1::2]):
        if raw_depth != 16 or raw.shape[0] != 2:
            raise CorruptFileError(path, "expected a 16-bit record with depth and infrared planes")
        if rgb_depth != 8 or rgb.shape[0] != 3:
            raise CorruptFileError(path, "expected an 8-bit record with R, G, B planes")
        try:
            frames.append(RawFrame(raw[0], raw[1], np.ascontiguousarray(np.moveaxis(rgb, 0, -1))))
        except DimensionMismatchError as exc:
            raise CorruptFileError(path, str(exc)) from exc
    return frames


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CorruptFileError(path, f"unreadable: {exc.strerror}") from exc
