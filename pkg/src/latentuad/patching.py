"""Voxel sampling and 2D transverse patch extraction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .volume import Volume


@dataclass(frozen=True, eq=False)
class Patch:
    window: np.ndarray  # (p, p, C)
    location: tuple[int, int, int]
    subject_id: Any = None


@dataclass(frozen=True)
class PatchPair:
    a: Patch
    b: Patch

    def __post_init__(self):
        if self.a.location != self.b.location:
            raise ValueError("paired patches must share a location")
        if self.a.subject_id == self.b.subject_id:
            raise ValueError("paired patches must come from different subjects")


def eligible_mask(mask: np.ndarray, margin: int) -> np.ndarray:
    """In-mask voxels whose x/y distance to the field-of-view border is >= margin."""
    out = np.zeros_like(mask, dtype=bool)
    nx, ny = mask.shape[:2]
    if nx - 2 * margin <= 0 or ny - 2 * margin <= 0:
        return out
    out[margin:nx - margin, margin:ny - margin, :] = mask[margin:nx - margin, margin:ny - margin, :]
    return out


def eligible_locations(mask: np.ndarray, margin: int) -> np.ndarray:
    return np.argwhere(eligible_mask(mask, margin))


def sample_locations(mask, n, margin, rng_seed):
    """Draw ``n`` eligible voxels uniformly with replacement; returns an (n, 3) int array."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand = eligible_locations(np.asarray(mask, dtype=bool), margin)
    if len(cand) == 0:
        raise ValueError(f"no in-mask voxel at distance >= {margin} from the x/y borders")
    rng = np.random.default_rng(rng_seed)
    return cand[rng.integers(0, len(cand), size=n)]


def _check_window(shape, loc, p):
    if p < 1 or p % 2 == 0:
        raise ValueError(f"patch side must be a positive odd integer, got {p}")
    h = p // 2
    x, y, z = (int(c) for c in loc)
    if not (h <= x < shape[0] - h and h <= y < shape[1] - h and 0 <= z < shape[2]):
        raise IndexError(f"{p}x{p} window at {(x, y, z)} exits volume of dims {tuple(shape[:3])}")


def extract_patch(v: Volume, loc, p: int, subject_id=None) -> Patch:
    _check_window(v.dims, loc, p)
    h = p // 2
    x, y, z = (int(c) for c in loc)
    window = np.array(v.data[x - h:x + h + 1, y - h:y + h + 1, z, :])
    return Patch(window, (x, y, z), subject_id)


def extract_patches(v: Volume, locs, p: int) -> np.ndarray:
    """Batch extraction; returns (N, C, p, p), the layout the auto-encoder consumes."""
    locs = np.asarray(locs, dtype=np.int64).reshape(-1, 3)
    if p < 1 or p % 2 == 0:
        raise ValueError(f"patch side must be a positive odd integer, got {p}")
    h = p // 2
    nx, ny, nz = v.dims
    bad = (locs[:, 0] < h) | (locs[:, 0] >= nx - h) | (locs[:, 1] < h) | (locs[:, 1] >= ny - h) | (locs[:, 2] < 0) | (locs[:, 2] >= nz)
    if np.any(bad):
        raise IndexError(f"{p}x{p} window at {tuple(locs[bad][0])} exits volume of dims {v.dims}")
    off = np.arange(-h, h + 1)
    xs = locs[:, 0, None, None] + off[None, :, None]
    ys = locs[:, 1, None, None] + off[None, None, :]
    zs = locs[:, 2, None, None]
    win = v.data[xs, ys, zs]  # (N, p, p, C)
    return np.ascontiguousarray(win.transpose(0, 3, 1, 2))


def sample_pairs(volumes, masks, n_pairs, p, rng_seed, subject_ids=None):
    """Siamese pairs: same location in two distinct subjects chosen uniformly.

    The location is drawn from voxels eligible in both subjects' masks.
    """
    volumes = list(volumes)
    if len(volumes) < 2:
        raise ValueError("sample_pairs needs at least two subjects")
    ids = list(subject_ids) if subject_ids is not None else list(range(len(volumes)))
    rng = np.random.default_rng(rng_seed)
    h = p // 2
    elig = [eligible_mask(np.asarray(m, dtype=bool), h) for m in masks]
    pairs = []
    cache = {}
    for _ in range(n_pairs):
        i, j = rng.choice(len(volumes), size=2, replace=False)
        key = (min(i, j), max(i, j))
        if key not in cache:
            cache[key] = np.argwhere(elig[i] & elig[j])
        cand = cache[key]
        if len(cand) == 0:
            raise ValueError(f"subjects {ids[i]} and {ids[j]} share no eligible voxel")
        loc = tuple(int(c) for c in cand[rng.integers(len(cand))])
        pairs.append(PatchPair(extract_patch(volumes[i], loc, p, ids[i]), extract_patch(volumes[j], loc, p, ids[j])))
    return pairs


def pair_arrays(pairs):
    """Stack a list of PatchPair into two (N, C, p, p) arrays."""
    a = np.stack([pp.a.window for pp in pairs]).transpose(0, 3, 1, 2)
    b = np.stack([pp.b.window for pp in pairs]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(a), np.ascontiguousarray(b)


def sample_pair_arrays(volumes, masks, n_pairs, p, rng_seed):
    """Vectorized ``sample_pairs`` straight to arrays; same distribution, no Patch objects."""
    volumes = list(volumes)
    if len(volumes) < 2:
        raise ValueError("sample_pairs needs at least two subjects")
    rng = np.random.default_rng(rng_seed)
    h = p // 2
    common = eligible_mask(np.logical_and.reduce([np.asarray(m, dtype=bool) for m in masks]), h)
    cand = np.argwhere(common)
    if len(cand) == 0:
        raise ValueError("subjects share no eligible voxel")
    n = len(volumes)
    first = rng.integers(0, n, size=n_pairs)
    second = (first + rng.integers(1, n, size=n_pairs)) % n
    locs = cand[rng.integers(0, len(cand), size=n_pairs)]
    c = volumes[0].channels
    a = np.empty((n_pairs, c, p, p))
    b = np.empty_like(a)
    for s in range(n):
        sel = first == s
        if sel.any():
            a[sel] = extract_patches(volumes[s], locs[sel], p)
        sel = second == s
        if sel.any():
            b[sel] = extract_patches(volumes[s], locs[sel], p)
    return a, b
