"""Synthetic multi-channel phantoms with known anomaly ground truth.

A phantom is an ellipsoidal foreground filled with a per-channel base
intensity plus a smooth, channel-coupled random texture; the background is
zero. Anomalies are spheres whose added contrast ``delta`` is expressed in
units of the texture standard deviation and tapered by a cosine roll-off.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from .evaluation import CONTROL, PATIENT, SubjectMeta, write_metadata
from .volume import LabelAtlas, Volume, save_volume, write_label_names


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (40, 40, 16)
    channels: int = 3
    corr_length: float = 2.0  # voxels; autocorrelation exp(-d^2 / (2 l^2))
    base: tuple = (1.0, 0.8, 0.6)
    amplitude: tuple = (0.1, 0.1, 0.1)  # texture standard deviation per channel
    coupling: float = 0.3  # correlation between any two channels of the texture
    semi_axes: tuple = (0.45, 0.45, 0.45)  # fraction of each dimension
    voxel_size_mm: tuple = (1.5, 1.5, 1.5)
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if self.channels < 1 or len(self.base) != self.channels or len(self.amplitude) != self.channels:
            raise ValueError("base and amplitude need one entry per channel")
        if self.corr_length < 0 or min(self.amplitude) < 0:
            raise ValueError("corr_length and amplitudes must be >= 0")
        if self.channels > 1 and not -1.0 / (self.channels - 1) < self.coupling < 1.0:
            raise ValueError(f"coupling {self.coupling} does not give a valid correlation matrix")

    def with_seed(self, seed):
        return PhantomSpec(self.dims, self.channels, self.corr_length, self.base, self.amplitude,
                           self.coupling, self.semi_axes, self.voxel_size_mm, seed)


@dataclass(frozen=True)
class AnomalySpec:
    center: tuple
    radius: float  # voxels; the taper reaches zero here
    delta: tuple = (1.5,)  # per channel in texture-sigma units; one entry broadcasts
    rolloff: float = 0.5  # fraction of the radius taken by the cosine roll-off

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if not 0.0 <= self.rolloff <= 1.0:
            raise ValueError("rolloff must lie in [0, 1]")


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def foreground_mask(spec: PhantomSpec) -> np.ndarray:
    x, y, z = _grid(spec.dims)
    r2 = 0.0
    for g, n, a in zip((x, y, z), spec.dims, spec.semi_axes):
        c = (n - 1) / 2.0
        r2 = r2 + ((g - c) / max(a * n, 1e-12)) ** 2
    return r2 <= 1.0


def texture(spec: PhantomSpec) -> np.ndarray:
    """Unit-variance channel-coupled texture ``(nx, ny, nz, C)``.

    Gaussian-filtering white noise with sigma ``l / sqrt(2)`` gives a
    Gaussian autocorrelation of length ``l``.
    """
    rng = np.random.default_rng([spec.seed, 11])
    noise = rng.standard_normal((spec.channels,) + tuple(spec.dims))
    sigma = spec.corr_length / np.sqrt(2.0)
    fields = []
    for c in range(spec.channels):
        f = gaussian_filter(noise[c], sigma, mode="wrap") if sigma > 0 else noise[c]
        fields.append((f - f.mean()) / f.std())
    fields = np.stack(fields, axis=-1)
    R = np.full((spec.channels, spec.channels), spec.coupling)
    np.fill_diagonal(R, 1.0)
    return fields @ np.linalg.cholesky(R).T


def generate_normal(spec: PhantomSpec):
    """``(Volume, foreground mask)``; deterministic in ``spec.seed``."""
    fg = foreground_mask(spec)
    data = np.asarray(spec.base) + np.asarray(spec.amplitude) * texture(spec)
    data = np.where(fg[..., None], data, 0.0)
    return Volume(data, spec.voxel_size_mm), fg


def taper(r, radius, rolloff):
    """1 on the inner core, cosine roll-off to exactly 0 at ``radius``, 0 beyond."""
    r = np.asarray(r, dtype=np.float64)
    inner = radius * (1.0 - rolloff)
    out = np.zeros_like(r)
    out[r <= inner] = 1.0
    ring = (r > inner) & (r < radius)
    out[ring] = 0.5 * (1.0 + np.cos(np.pi * (r[ring] - inner) / (radius - inner)))
    return out


def anomaly_profile(dims, a: AnomalySpec):
    x, y, z = _grid(dims)
    r = np.sqrt((x - a.center[0]) ** 2 + (y - a.center[1]) ** 2 + (z - a.center[2]) ** 2)
    w = taper(r, a.radius, a.rolloff)
    return w, w > 0


def inject_anomaly(v: Volume, a: AnomalySpec, spec: PhantomSpec):
    """``(Volume, ground-truth mask)``; voxels outside the mask are left bit-identical."""
    w, mask = anomaly_profile(v.dims, a)
    fg = foreground_mask(spec)
    if fg.shape != mask.shape:
        raise ValueError(f"phantom dims {fg.shape} do not match volume {v.dims}")
    if np.any(mask & ~fg):
        raise ValueError(f"anomaly at {a.center} with radius {a.radius} leaves the foreground")
    delta = np.broadcast_to(np.asarray(a.delta, dtype=np.float64), (v.channels,))
    data = np.array(v.data)
    data[mask] = data[mask] + w[mask][:, None] * delta * np.asarray(spec.amplitude)
    return Volume(data, v.voxel_size_mm), mask


def random_anomaly(spec: PhantomSpec, radius, delta, rng, margin=0) -> AnomalySpec:
    """Sphere centre drawn uniformly among voxels where the whole sphere fits the foreground.

    ``margin`` additionally keeps the centre that far from the x/y borders.
    """
    fg = foreground_mask(spec)
    x, y, z = _grid(spec.dims)
    # conservative: centre more than radius + 1 from the foreground boundary
    ok = distance_transform_edt(fg) > radius + 1.0
    nx, ny, _ = spec.dims
    ok &= (x >= margin) & (x < nx - margin) & (y >= margin) & (y < ny - margin)
    cands = np.argwhere(ok)
    if len(cands) == 0:
        raise ValueError(f"no centre keeps a radius-{radius} sphere inside the foreground")
    c = cands[rng.integers(len(cands))]
    return AnomalySpec(tuple(int(v) for v in c), float(radius), tuple(np.atleast_1d(delta).tolist()))


def make_atlas(spec: PhantomSpec) -> LabelAtlas:
    """Four foreground quadrants in the transverse plane."""
    fg = foreground_mask(spec)
    x, y, _ = _grid(spec.dims)
    cx, cy = (spec.dims[0] - 1) / 2.0, (spec.dims[1] - 1) / 2.0
    labels = 1 + (x > cx).astype(np.int64) + 2 * (y > cy).astype(np.int64)
    labels = np.where(fg, labels, 0)
    names = {1: "quadrant_lo_x_lo_y", 2: "quadrant_hi_x_lo_y", 3: "quadrant_lo_x_hi_y", 4: "quadrant_hi_x_hi_y"}
    return LabelAtlas(labels, names)


@dataclass
class Subject:
    subject_id: str
    label: str
    volume: Volume
    anomaly: AnomalySpec | None = None
    truth: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def generate_cohort(spec: PhantomSpec, n_normal, n_anomalous, radius=5.0, delta=1.5, margin=7, seed=0):
    """Controls ``c000..`` and patients ``p000..``, each with its own texture seed.

    Ages and sexes are synthetic metadata drawn from ``seed`` for the fold stratifier.
    """
    rng = np.random.default_rng([seed, 3])
    subjects = []
    for i in range(n_normal + n_anomalous):
        patient = i >= n_normal
        sid = f"p{i - n_normal:03d}" if patient else f"c{i:03d}"
        v, _ = generate_normal(spec.with_seed(int(rng.integers(2**31))))
        meta = {"age": float(np.round(rng.uniform(50, 80), 1)), "sex": "F" if rng.random() < 0.5 else "M"}
        a = truth = None
        if patient:
            a = random_anomaly(spec, radius, delta, rng, margin)
            v, truth = inject_anomaly(v, a, spec)
        subjects.append(Subject(sid, PATIENT if patient else CONTROL, v, a, truth, meta))
    return subjects


def write_cohort(out_dir, subjects, spec: PhantomSpec):
    """Raw volumes, ``atlas.raw`` + ``atlas_names.tsv``, ``manifest.tsv`` and ``metadata.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    for s in subjects:
        save_volume(os.path.join(out_dir, f"{s.subject_id}.raw"), s.volume)
    atlas = make_atlas(spec)
    save_volume(os.path.join(out_dir, "atlas.raw"), Volume(atlas.labels[..., None].astype(np.float64), spec.voxel_size_mm))
    write_label_names(os.path.join(out_dir, "atlas_names.tsv"), atlas.names)
    with open(os.path.join(out_dir, "manifest.tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["subject_id", "label", "center_x", "center_y", "center_z", "radius", "delta"])
        for s in subjects:
            if s.anomaly is None:
                w.writerow([s.subject_id, s.label, "", "", "", "", ""])
            else:
                a = s.anomaly
                w.writerow([s.subject_id, s.label, *a.center, repr(a.radius), ";".join(repr(float(d)) for d in a.delta)])
    write_metadata(os.path.join(out_dir, "metadata.csv"),
                   [SubjectMeta(s.subject_id, s.label, s.meta["age"], s.meta["sex"]) for s in subjects])
