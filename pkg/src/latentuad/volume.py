"""Volumetric multi-channel images: containers, NIfTI-1 reading, normalization."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RAW_MAGIC = b"UADV"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sI3II3d")

NIFTI_DTYPES = {4: "i2", 8: "i4", 16: "f4", 64: "f8"}


class VolumeFormatError(ValueError):
    """Raised for malformed or unsupported volume files."""


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense 3D field with ``channels`` values per voxel.

    ``data`` has shape ``(nx, ny, nz, channels)``; flattening it in C order
    gives the voxel-major, channel-minor layout used on disk.
    """

    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4:
            raise ValueError(f"volume data must be 3D or 4D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"volume dims and channels must be positive, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        vs = tuple(float(s) for s in self.voxel_size_mm)
        if len(vs) != 3 or min(vs) <= 0:
            raise ValueError(f"voxel sizes must be three positive reals, got {self.voxel_size_mm}")
        data = np.array(data, copy=True)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size_mm", vs)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.voxel_size_mm == other.voxel_size_mm and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LabelAtlas:
    """Integer label field (0 = background) with region names."""

    labels: np.ndarray
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim == 4 and labels.shape[3] == 1:
            labels = labels[..., 0]
        if labels.ndim != 3:
            raise ValueError(f"atlas labels must be 3D, got shape {labels.shape}")
        if not np.all(labels == np.round(labels)):
            raise ValueError("atlas labels must be integers")
        labels = labels.astype(np.int64)
        names = {int(k): str(v) for k, v in self.names.items()}
        missing = sorted(set(np.unique(labels).tolist()) - {0} - set(names))
        if missing:
            raise ValueError(f"atlas label ids without a name: {missing}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "names", names)

    @property
    def dims(self):
        return tuple(self.labels.shape)


@dataclass(frozen=True)
class NormalizationStats:
    q01: tuple[float, ...]
    q99: tuple[float, ...]

    def __post_init__(self):
        if len(self.q01) != len(self.q99):
            raise ValueError("q01 and q99 must have one entry per channel")
        for c, (lo, hi) in enumerate(zip(self.q01, self.q99)):
            if not hi > lo:
                raise ValueError(f"channel {c}: q99 ({hi}) must exceed q01 ({lo})")

    def to_dict(self):
        return {"q01": list(self.q01), "q99": list(self.q99)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(float(v) for v in d["q01"]), tuple(float(v) for v in d["q99"]))


# --------------------------------------------------------------------------
# NIfTI-1 (read only)
# --------------------------------------------------------------------------


def _nifti_endian(header: bytes) -> str:
    for endian in "<>":
        if struct.unpack(endian + "i", header[:4])[0] == 348:
            return endian
    raise VolumeFormatError("not a NIfTI-1 header: sizeof_hdr is not 348 in either byte order")


def read_nifti(buf: bytes) -> Volume:
    """Parse an uncompressed single-file NIfTI-1 image.

    Supports int16, int32, float32 and float64 data with 3 or 4 dims.
    The 4th dim becomes the channel axis. Orientation is ignored.
    """
    buf = bytes(buf)
    if len(buf) < 348:
        raise VolumeFormatError(f"NIfTI header truncated: {len(buf)} bytes, need 348")
    e = _nifti_endian(buf)
    dim = struct.unpack(e + "8h", buf[40:56])
    datatype = struct.unpack(e + "h", buf[70:72])[0]
    pixdim = struct.unpack(e + "8f", buf[76:108])
    vox_offset = struct.unpack(e + "f", buf[108:112])[0]
    slope, inter = struct.unpack(e + "2f", buf[112:120])

    if dim[0] not in (3, 4):
        raise VolumeFormatError(f"unsupported dim[0]={dim[0]}, expected 3 or 4")
    if datatype not in NIFTI_DTYPES:
        raise VolumeFormatError(f"unsupported NIfTI datatype code {datatype}")
    shape = tuple(int(d) for d in dim[1:4])
    channels = int(dim[4]) if dim[0] == 4 else 1
    if min(shape) < 1 or channels < 1:
        raise VolumeFormatError(f"non-positive dims {shape} x {channels}")

    dtype = np.dtype(e + NIFTI_DTYPES[datatype])
    offset = max(int(vox_offset), 348)
    count = int(np.prod(shape)) * channels
    expected = count * dtype.itemsize
    actual = len(buf) - offset
    if actual < expected:
        raise VolumeFormatError(f"NIfTI data truncated: expected {expected} bytes, found {max(actual, 0)}")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).astype(np.float64)
    data = raw.reshape(shape + (channels,), order="F")
    if slope != 0:
        data = data * slope + inter
    return Volume(data, voxel_size_mm=tuple(abs(p) if p else 1.0 for p in pixdim[1:4]))


def load_nifti(path) -> Volume:
    return read_nifti(Path(path).read_bytes())


# --------------------------------------------------------------------------
# raw container
# --------------------------------------------------------------------------


def write_raw(v: Volume) -> bytes:
    header = _RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, *v.dims, v.channels, *v.voxel_size_mm)
    return header + np.ascontiguousarray(v.data, dtype="<f4").tobytes()


def read_raw(buf: bytes) -> Volume:
    buf = bytes(buf)
    if len(buf) < _RAW_HEADER.size:
        raise VolumeFormatError(f"raw container truncated: {len(buf)} bytes")
    magic, version, nx, ny, nz, nc, sx, sy, sz = _RAW_HEADER.unpack_from(buf)
    if magic != RAW_MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}, expected {RAW_MAGIC!r}")
    if version != RAW_VERSION:
        raise VolumeFormatError(f"unsupported raw container version {version}")
    count = nx * ny * nz * nc
    if len(buf) - _RAW_HEADER.size != 4 * count:
        raise VolumeFormatError(f"raw data length mismatch: expected {4 * count} bytes, found {len(buf) - _RAW_HEADER.size}")
    data = np.frombuffer(buf, dtype="<f4", offset=_RAW_HEADER.size).reshape(nx, ny, nz, nc)
    return Volume(data, voxel_size_mm=(sx, sy, sz))


def save_volume(path, v: Volume):
    Path(path).write_bytes(write_raw(v))


def load_volume(path) -> Volume:
    path = Path(path)
    if path.suffix == ".nii":
        return load_nifti(path)
    return read_raw(path.read_bytes())


def read_label_names(path) -> dict:
    names = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row or row[0].startswith("#"):
                continue
            if not row[0].strip().lstrip("-").isdigit():
                continue  # header line
            names[int(row[0])] = row[1]
    return names


def write_label_names(path, names: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "name"])
        for k in sorted(names):
            w.writerow([k, names[k]])


def load_atlas(labels_path, names_path) -> LabelAtlas:
    v = load_volume(labels_path)
    return LabelAtlas(v.data[..., 0], read_label_names(names_path))


# --------------------------------------------------------------------------
# intensity normalization and masking
# --------------------------------------------------------------------------


def fit_normalization(train_volumes) -> NormalizationStats:
    """1% / 99% quantiles of the pooled train intensities, per channel."""
    train_volumes = list(train_volumes)
    if not train_volumes:
        raise ValueError("need at least one training volume")
    nc = {v.channels for v in train_volumes}
    if len(nc) != 1:
        raise ValueError(f"training volumes disagree on channel count: {sorted(nc)}")
    pooled = np.concatenate([v.data.reshape(-1, v.channels) for v in train_volumes])
    q = np.quantile(pooled, [0.01, 0.99], axis=0, method="linear")
    for c in range(pooled.shape[1]):
        if not q[1, c] > q[0, c]:
            raise ValueError(f"channel {c} is degenerate: q01 == q99 == {q[0, c]}")
    return NormalizationStats(tuple(q[0].tolist()), tuple(q[1].tolist()))


def normalize(v: Volume, s: NormalizationStats) -> Volume:
    if v.channels != len(s.q01):
        raise ValueError(f"volume has {v.channels} channels, stats have {len(s.q01)}")
    lo = np.asarray(s.q01)
    hi = np.asarray(s.q99)
    return Volume((v.data - lo) / (hi - lo), v.voxel_size_mm)


def brain_mask(v: Volume, eps: float = 0.0) -> np.ndarray:
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return np.any(np.abs(v.data) > eps, axis=3)
