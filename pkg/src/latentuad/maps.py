"""Voxel-wise anomaly maps, the abnormality threshold and per-region summaries.

Every scorer attributes its value to the central voxel of the patch it
scored. Voxels that were never scored are invalid and excluded from every
denominator.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import mmst
from .patching import extract_patches
from .volume import LabelAtlas, Volume, read_raw, write_raw

WHOLE_BRAIN = "whole_brain"


@dataclass(frozen=True, eq=False)
class AnomalyMap:
    scores: np.ndarray  # (nx, ny, nz), higher = more anomalous
    valid: np.ndarray  # (nx, ny, nz) bool

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if scores.ndim != 3 or scores.shape != valid.shape:
            raise ValueError(f"scores {scores.shape} and valid {valid.shape} must be matching 3D fields")
        if not np.all(np.isfinite(scores[valid])):
            raise ValueError("scores must be finite on valid voxels")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "valid", valid)

    @property
    def dims(self):
        return self.scores.shape

    def valid_scores(self):
        return self.scores[self.valid]


def map_from_locations(dims, locations, values) -> AnomalyMap:
    """Map with ``values`` written at ``locations`` and every other voxel invalid."""
    locs = np.asarray(locations, dtype=np.int64).reshape(-1, 3)
    scores = np.zeros(dims)
    valid = np.zeros(dims, dtype=bool)
    scores[locs[:, 0], locs[:, 1], locs[:, 2]] = values
    valid[locs[:, 0], locs[:, 1], locs[:, 2]] = True
    return AnomalyMap(scores, valid)


def _batched(v: Volume, locations, p, fn, chunk):
    locs = np.asarray(locations, dtype=np.int64).reshape(-1, 3)
    out = np.empty(len(locs))
    for s in range(0, len(locs), chunk):
        out[s:s + chunk] = fn(extract_patches(v, locs[s:s + chunk], p))
    return out


def recon_errors(m, v: Volume, locations, chunk=4096):
    """``||x - x_hat||^2`` of the patch at each location, inference mode."""
    c, p, _ = m.input_shape
    if v.channels != c:
        raise ValueError(f"model expects {c} channels, volume has {v.channels}")

    def fn(x):
        r = m.decode_batch(m.encode_batch(x)) - x
        return np.sum(r * r, axis=(1, 2, 3))

    return _batched(v, locations, p, fn, chunk)


def encode_locations(m, v: Volume, locations, chunk=4096):
    """Latent vectors ``(N, M)`` of the patches centred at ``locations``."""
    c, p, _ = m.input_shape
    if v.channels != c:
        raise ValueError(f"model expects {c} channels, volume has {v.channels}")
    locs = np.asarray(locations, dtype=np.int64).reshape(-1, 3)
    out = np.empty((len(locs), m.latent_dim))
    for s in range(0, len(locs), chunk):
        out[s:s + chunk] = m.encode_batch(extract_patches(v, locs[s:s + chunk], p))
    return out


def latent_scores(scorer, z):
    """Anomaly score (higher = more anomalous) of latent rows under either model kind."""
    if isinstance(scorer, mmst.MmstParams):
        return mmst.anomaly_score(scorer, z)
    if hasattr(scorer, "anomaly_score"):
        return scorer.anomaly_score(z)
    return np.asarray(scorer(z), dtype=np.float64)


def recon_error_map(m, v: Volume, locations) -> AnomalyMap:
    return map_from_locations(v.dims, locations, recon_errors(m, v, locations))


def latent_score_map(scorer, m, v: Volume, locations) -> AnomalyMap:
    z = encode_locations(m, v, locations)
    if isinstance(scorer, mmst.MmstParams):
        d = scorer.M
    elif hasattr(scorer, "models"):
        d = scorer.models[0].support_vectors.shape[1]
    else:
        d = None
    if d is not None and d != z.shape[1]:
        raise ValueError(f"scorer latent dimension {d} differs from encoder output {z.shape[1]}")
    return map_from_locations(v.dims, locations, latent_scores(scorer, z))


def abnormality_threshold(train_maps, q=0.98) -> float:
    """Linear-interpolation ``q``-quantile of all valid scores of the training maps, pooled."""
    if not 0.90 <= q < 1.0:
        raise ValueError(f"q must lie in [0.90, 1.0), got {q}")
    pool = [m.valid_scores() for m in train_maps]
    pool = np.concatenate(pool) if pool else np.empty(0)
    if pool.size == 0:
        raise ValueError("no valid training scores to pool")
    return float(np.quantile(pool, q))


def binarize(amap: AnomalyMap, threshold) -> np.ndarray:
    return amap.valid & (amap.scores > threshold)


@dataclass(frozen=True)
class RegionRow:
    label: int
    name: str
    n_voxels: int
    n_abnormal: int
    pct: float | None  # None when the region has no valid voxel


@dataclass(frozen=True)
class RegionReport:
    rows: tuple

    def by_label(self):
        return {r.label: r for r in self.rows}

    def pct(self, label):
        return self.by_label()[label].pct


def _row(label, name, sel, abnormal):
    n = int(np.count_nonzero(sel))
    k = int(np.count_nonzero(abnormal & sel))
    return RegionRow(label, name, n, k, 100.0 * k / n if n else None)


def region_aggregate(abnormal, atlas: LabelAtlas | None = None, valid=None) -> RegionReport:
    """Percentage of abnormal voxels among the valid voxels of each region.

    Label 0 is the whole-brain row computed over every valid voxel.
    """
    abnormal = np.asarray(abnormal, dtype=bool)
    valid = np.ones_like(abnormal) if valid is None else np.asarray(valid, dtype=bool)
    if valid.shape != abnormal.shape:
        raise ValueError(f"valid mask {valid.shape} does not match map {abnormal.shape}")
    rows = [_row(0, WHOLE_BRAIN, valid, abnormal)]
    if atlas is not None:
        if atlas.dims != abnormal.shape:
            raise ValueError(f"atlas dims {atlas.dims} do not match map {abnormal.shape}")
        for label in sorted(atlas.names):
            rows.append(_row(int(label), atlas.names[label], valid & (atlas.labels == label), abnormal))
    return RegionReport(tuple(rows))


def write_report(path, report: RegionReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "name", "n_voxels", "n_abnormal", "pct"])
        for r in report.rows:
            w.writerow([r.label, r.name, r.n_voxels, r.n_abnormal, "" if r.pct is None else repr(r.pct)])


def read_report(path) -> RegionReport:
    with open(path, newline="") as fh:
        rows = [
            RegionRow(int(d["label"]), d["name"], int(d["n_voxels"]), int(d["n_abnormal"]), float(d["pct"]) if d["pct"] else None)
            for d in csv.DictReader(fh)
        ]
    return RegionReport(tuple(rows))


def map_to_bytes(amap: AnomalyMap, voxel_size_mm=(1.0, 1.0, 1.0)) -> bytes:
    """Raw volume container with scores as channel 0 and validity (0/1) as channel 1.

    Scores are stored as float32 like every raw volume.
    """
    data = np.stack([np.where(amap.valid, amap.scores, 0.0), amap.valid.astype(np.float64)], axis=-1)
    return write_raw(Volume(data, tuple(voxel_size_mm)))


def map_from_bytes(buf: bytes) -> AnomalyMap:
    v = read_raw(buf)
    if v.channels != 2:
        raise ValueError(f"anomaly map container needs 2 channels, found {v.channels}")
    return AnomalyMap(v.data[..., 0], v.data[..., 1] > 0.5)


def save_map(path, amap: AnomalyMap, voxel_size_mm=(1.0, 1.0, 1.0)):
    with open(path, "wb") as fh:
        fh.write(map_to_bytes(amap, voxel_size_mm))


def load_map(path) -> AnomalyMap:
    with open(path, "rb") as fh:
        return map_from_bytes(fh.read())
