"""Atlas ROI extraction, cubic resampling and fixed-length patch sets."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume_io import (
    HEADER_SIZE,
    BadMagic,
    BadVersion,
    LabelVolume,
    RoiTable,
    TruncatedData,
    Volume,
)


class DimsMismatch(ValueError):
    pass


class UnknownLabel(ValueError):
    def __init__(self, roi_id: int):
        super().__init__(f"label {roi_id} is not in the ROI table")
        self.roi_id = roi_id


class DuplicateRoi(ValueError):
    def __init__(self, roi_id: int):
        super().__init__(f"ROI {roi_id} appears more than once")
        self.roi_id = roi_id


@dataclass(frozen=True)
class RoiExtract:
    """One ROI cropped to its tight bounding box, zero outside the mask.

    ``bbox`` holds inclusive bounds ((x0, x1), (y0, y1), (z0, z1)).
    """

    roi_id: int
    bbox: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]
    masked_voxels: np.ndarray


@dataclass(frozen=True)
class RoiPatchSet:
    subject_id: str
    patch_size: int
    patches: np.ndarray  # (N, S, S, S)
    present_mask: np.ndarray  # (N,) bool

    @property
    def n_rois(self) -> int:
        return int(self.patches.shape[0])


def segment_rois(v: Volume, labels: LabelVolume, table: RoiTable) -> list[RoiExtract]:
    if v.dims != labels.dims:
        raise DimsMismatch(f"volume dims {v.dims} != label dims {labels.dims}")
    lab = labels.data
    known = set(table.ids)
    for roi_id in np.unique(lab):
        if roi_id != 0 and int(roi_id) not in known:
            raise UnknownLabel(int(roi_id))

    extracts = []
    for roi_id in table.ids:
        mask = lab == roi_id
        if not mask.any():
            continue
        bounds = []
        for axis in range(3):
            other = tuple(a for a in range(3) if a != axis)
            hits = np.flatnonzero(mask.any(axis=other))
            bounds.append((int(hits[0]), int(hits[-1])))
        sl = tuple(slice(lo, hi + 1) for lo, hi in bounds)
        crop = np.where(mask[sl], v.data[sl], np.float32(0)).astype(np.float64)
        extracts.append(RoiExtract(roi_id, tuple(bounds), crop))
    return extracts


def sample_coordinates(m: int, s: int) -> np.ndarray:
    """Source-index coordinate sampled by each of the ``s`` outputs on an axis of extent ``m``."""
    if s == 1 or m == 1:
        return np.full(s, (m - 1) / 2.0)
    return np.arange(s) * ((m - 1) / (s - 1))


def _lerp_axis(a: np.ndarray, axis: int, s: int) -> np.ndarray:
    m = a.shape[axis]
    coords = sample_coordinates(m, s)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, m - 1)
    shape = [1] * a.ndim
    shape[axis] = s
    frac = (coords - lo).reshape(shape)
    lo_v = np.take(a, lo, axis=axis)
    return lo_v + frac * (np.take(a, hi, axis=axis) - lo_v)


def resample_trilinear(e: RoiExtract, s: int) -> np.ndarray:
    """Resample an extract to an s*s*s cube.

    Trilinear interpolation factorises into one linear interpolation per
    axis, applied here axis by axis as ``a + t * (b - a)`` so constant
    blocks and native-size resampling are reproduced exactly.
    """
    if s < 1:
        raise ValueError("patch size must be positive")
    out = np.asarray(e.masked_voxels, dtype=np.float64)
    assert min(out.shape) >= 1, "degenerate ROI box"
    for axis in range(3):
        out = _lerp_axis(out, axis, s)
    return out


def assemble_patch_set(extracts, table: RoiTable, s: int, subject_id: str) -> RoiPatchSet:
    n = len(table)
    patches = np.zeros((n, s, s, s))
    present = np.zeros(n, dtype=bool)
    for e in extracts:
        idx = table.index(e.roi_id)
        if present[idx]:
            raise DuplicateRoi(e.roi_id)
        patches[idx] = resample_trilinear(e, s)
        present[idx] = True
    return RoiPatchSet(subject_id, s, patches, present)


def patch_set_from_volume(v: Volume, labels: LabelVolume, table: RoiTable, s: int, subject_id: str) -> RoiPatchSet:
    return assemble_patch_set(segment_rois(v, labels, table), table, s, subject_id)


# Patch-set file: RVOL header with magic RPAT and dims (S, S, S), then
# N and S as uint32, N*S^3 float32 voxels and N mask bytes.
PATCH_MAGIC = b"RPAT"
_PATCH_HEADER = struct.Struct("<4sHBB3III")


def write_patch_set(p: RoiPatchSet, path) -> None:
    s, n = p.patch_size, p.n_rois
    header = _PATCH_HEADER.pack(PATCH_MAGIC, 1, 0, 0, s, s, s, n, s)
    payload = np.ascontiguousarray(p.patches, dtype="<f4").tobytes()
    mask = np.asarray(p.present_mask, dtype=np.uint8).tobytes()
    Path(path).write_bytes(header + payload + mask)


def read_patch_set(path, subject_id: str | None = None) -> RoiPatchSet:
    raw = Path(path).read_bytes()
    if raw[:4] != PATCH_MAGIC:
        raise BadMagic(f"expected magic {PATCH_MAGIC!r}, found {raw[:4]!r}", 0)
    if len(raw) < _PATCH_HEADER.size:
        raise TruncatedData("patch-set header truncated", len(raw))
    _, version, _, _, _, _, _, n, s = _PATCH_HEADER.unpack_from(raw, 0)
    if version != 1:
        raise BadVersion(f"unsupported version {version}", 4)
    start = _PATCH_HEADER.size
    need = start + n * s**3 * 4 + n
    if len(raw) < need:
        raise TruncatedData(f"patch set needs {need} bytes, file has {len(raw)}", len(raw))
    patches = np.frombuffer(raw, dtype="<f4", count=n * s**3, offset=start).reshape(n, s, s, s)
    mask = np.frombuffer(raw, dtype=np.uint8, count=n, offset=start + n * s**3 * 4).astype(bool)
    sid = subject_id if subject_id is not None else Path(path).stem
    return RoiPatchSet(sid, s, patches.astype(np.float64), mask.copy())


assert _PATCH_HEADER.size == HEADER_SIZE + 8
