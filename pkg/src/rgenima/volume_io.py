"""RVOL volume and label files, plus the ROI table TSV.

RVOL v1 layout (all little-endian)::

    0-3    b"RVOL"
    4-5    version (uint16) = 1
    6      dtype code: 0 = float32, 1 = uint32
    7      reserved = 0
    8-19   dims x, y, z (3 x uint32)
    20-    payload, x slowest / z fastest
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RVOL"
VERSION = 1
DTYPE_FLOAT32 = 0
DTYPE_UINT32 = 1
HEADER = struct.Struct("<4sHBB3I")
HEADER_SIZE = HEADER.size  # 20

_NUMPY_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_UINT32: np.dtype("<u4")}


class VolumeFormatError(ValueError):
    """Base class for malformed RVOL files. ``offset`` is the failing byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagic(VolumeFormatError):
    pass


class BadVersion(VolumeFormatError):
    pass


class TruncatedData(VolumeFormatError):
    pass


class NonFiniteVoxel(VolumeFormatError):
    pass


class DTypeMismatch(VolumeFormatError):
    pass


class LabelOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class Volume:
    """Scalar intensity grid, float32, indexed [x, y, z]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite voxels")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)


@dataclass(frozen=True)
class LabelVolume:
    """Atlas label grid, uint32, 0 = background."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"label volume must be a non-empty 3D array, got shape {arr.shape}")
        if arr.dtype.kind == "f" or (arr.dtype.kind == "i" and arr.size and arr.min() < 0):
            raise ValueError("labels must be non-negative integers")
        object.__setattr__(self, "data", np.ascontiguousarray(arr, dtype=np.uint32))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def validate(self, table: "RoiTable") -> None:
        top = int(self.data.max())
        if top > table.max_id:
            raise LabelOutOfRange(f"label id {top} exceeds ROI table maximum {table.max_id}")


@dataclass(frozen=True)
class RoiTable:
    """Ordered (roi_id, roi_name) entries; the order is the canonical token order."""

    entries: tuple[tuple[int, str], ...] = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple((int(i), str(n)) for i, n in self.entries)
        ids = [i for i, _ in entries]
        if any(i <= 0 for i in ids):
            raise ValueError("roi ids must be positive")
        if ids != sorted(set(ids)):
            raise ValueError("roi ids must be unique and sorted ascending")
        object.__setattr__(self, "entries", entries)

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.entries]

    @property
    def names(self) -> list[str]:
        return [n for _, n in self.entries]

    @property
    def max_id(self) -> int:
        return self.entries[-1][0] if self.entries else 0

    def __len__(self) -> int:
        return len(self.entries)

    def index(self, roi_id: int) -> int:
        return self.ids.index(roi_id)


def _encode(arr: np.ndarray, dtype_code: int) -> bytes:
    x, y, z = arr.shape
    header = HEADER.pack(MAGIC, VERSION, dtype_code, 0, x, y, z)
    return header + np.ascontiguousarray(arr, dtype=_NUMPY_DTYPES[dtype_code]).tobytes(order="C")


def _decode(raw: bytes, expected_dtype: int) -> np.ndarray:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, found {raw[:4]!r}", 0)
    if len(raw) < HEADER_SIZE:
        raise TruncatedData(f"header needs {HEADER_SIZE} bytes, file has {len(raw)}", len(raw))
    _, version, dtype_code, _reserved, x, y, z = HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}", 4)
    if dtype_code != expected_dtype:
        raise DTypeMismatch(f"dtype code {dtype_code}, expected {expected_dtype}", 6)
    if min(x, y, z) < 1:
        raise TruncatedData(f"zero-sized dims {(x, y, z)}", 8)
    need = HEADER_SIZE + x * y * z * 4
    if len(raw) < need:
        raise TruncatedData(f"payload needs {need} bytes, file has {len(raw)}", len(raw))
    arr = np.frombuffer(raw, dtype=_NUMPY_DTYPES[dtype_code], count=x * y * z, offset=HEADER_SIZE)
    return arr.reshape(x, y, z)


def write_volume(v: Volume, path) -> None:
    Path(path).write_bytes(_encode(v.data, DTYPE_FLOAT32))


def read_volume(path) -> Volume:
    arr = _decode(Path(path).read_bytes(), DTYPE_FLOAT32)
    bad = np.flatnonzero(~np.isfinite(arr.ravel()))
    if bad.size:
        raise NonFiniteVoxel("non-finite voxel", HEADER_SIZE + 4 * int(bad[0]))
    return Volume(arr.astype(np.float32))


def write_labels(lv: LabelVolume, path) -> None:
    Path(path).write_bytes(_encode(lv.data, DTYPE_UINT32))


def read_labels(path) -> LabelVolume:
    return LabelVolume(_decode(Path(path).read_bytes(), DTYPE_UINT32).astype(np.uint32))


def write_roi_table(table: RoiTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("roi_id\troi_name\n")
        for roi_id, name in table.entries:
            fh.write(f"{roi_id}\t{name}\n")


def read_roi_table(path) -> RoiTable:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or rows[0] != ["roi_id", "roi_name"]:
        raise ValueError(f"{path}: expected header 'roi_id\\troi_name'")
    return RoiTable(tuple((int(r[0]), r[1]) for r in rows[1:] if r))
