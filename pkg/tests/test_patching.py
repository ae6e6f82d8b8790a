import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentuad.patching import (
    PatchPair,
    Patch,
    eligible_mask,
    extract_patch,
    extract_patches,
    pair_arrays,
    sample_locations,
    sample_pair_arrays,
    sample_pairs,
)
from latentuad.volume import Volume


def _ramp(dims=(9, 9, 3), c=2):
    x = np.arange(dims[0], dtype=np.float64)[:, None, None, None]
    return Volume(np.broadcast_to(x, dims + (c,)))


def test_single_eligible_voxel():
    m = np.zeros((9, 9, 2), bool)
    m[4, 5, 1] = True
    locs = sample_locations(m, 50, 3, 0)
    assert locs.shape == (50, 3)
    assert (locs == [4, 5, 1]).all()


def test_sample_locations_deterministic():
    m = np.ones((10, 10, 3), bool)
    np.testing.assert_array_equal(sample_locations(m, 100, 2, 7), sample_locations(m, 100, 2, 7))
    assert not np.array_equal(sample_locations(m, 100, 2, 7), sample_locations(m, 100, 2, 8))


def test_sample_locations_uniform_frequencies():
    m = np.zeros((8, 8, 1), bool)
    cells = [(2, 2, 0), (2, 5, 0), (5, 2, 0), (5, 5, 0)]
    for c in cells:
        m[c] = True
    locs = sample_locations(m, 10**6, 2, 3)
    for c in cells:
        freq = np.mean(np.all(locs == c, axis=1))
        assert abs(freq - 0.25) < 0.01


def test_sample_locations_errors():
    m = np.zeros((9, 9, 1), bool)
    m[0, 0, 0] = True
    with pytest.raises(ValueError, match="no in-mask voxel"):
        sample_locations(m, 3, 2, 0)
    with pytest.raises(ValueError):
        sample_locations(np.ones((9, 9, 1), bool), 0, 2, 0)


def test_eligible_mask_margin():
    e = eligible_mask(np.ones((10, 12, 2), bool), 3)
    assert e[3:7, 3:9].all() and e.sum() == 4 * 6 * 2
    assert not eligible_mask(np.ones((5, 5, 1), bool), 3).any()


def test_extract_patch_p1_is_channel_vector(rng):
    v = Volume(rng.normal(size=(4, 4, 2, 3)))
    p = extract_patch(v, (1, 2, 1), 1)
    np.testing.assert_array_equal(p.window[0, 0], v.data[1, 2, 1])


def test_extract_patch_constant_and_ramp():
    v = Volume(np.full((7, 7, 2, 2), 3.5))
    assert np.all(extract_patch(v, (3, 3, 0), 5).window == 3.5)
    w = extract_patch(_ramp(), (4, 5, 2), 5).window
    # rows follow x, so every column is the same x ramp
    np.testing.assert_array_equal(w[:, :, 0], np.repeat(np.arange(2, 7.0)[:, None], 5, axis=1))


def test_extract_patch_bounds():
    v = _ramp()
    with pytest.raises(IndexError):
        extract_patch(v, (1, 4, 0), 5)
    with pytest.raises(IndexError):
        extract_patch(v, (4, 4, 3), 5)
    with pytest.raises(ValueError):
        extract_patch(v, (4, 4, 0), 4)


def test_extract_patches_matches_single(rng):
    v = Volume(rng.normal(size=(11, 10, 3, 2)))
    locs = np.array([[3, 3, 0], [7, 6, 2], [5, 4, 1]])
    batch = extract_patches(v, locs, 7)
    assert batch.shape == (3, 2, 7, 7)
    for i, loc in enumerate(locs):
        np.testing.assert_array_equal(batch[i], extract_patch(v, loc, 7).window.transpose(2, 0, 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 3), st.integers(0, 10**6), st.integers(9, 16), st.integers(9, 16))
def test_sampled_windows_stay_in_bounds(half, seed, nx, ny):
    p = 2 * half + 1
    m = np.random.default_rng(seed).random((nx, ny, 2)) < 0.5
    if not eligible_mask(m, half).any():
        return
    v = Volume(np.zeros((nx, ny, 2, 1)))
    for loc in sample_locations(m, 20, half, seed):
        assert extract_patch(v, loc, p).window.shape == (p, p, 1)


def test_patch_pair_invariants():
    a = Patch(np.zeros((1, 1, 1)), (1, 1, 1), "s1")
    with pytest.raises(ValueError):
        PatchPair(a, Patch(np.zeros((1, 1, 1)), (1, 1, 2), "s2"))
    with pytest.raises(ValueError):
        PatchPair(a, Patch(np.zeros((1, 1, 1)), (1, 1, 1), "s1"))


def _subjects(n, dims=(9, 9, 2)):
    vols = [Volume(np.full(dims + (1,), float(i))) for i in range(n)]
    return vols, [np.ones(dims, bool)] * n


def test_sample_pairs_two_subjects():
    vols, masks = _subjects(2)
    pairs = sample_pairs(vols, masks, 40, 3, 0, ["a", "b"])
    for pp in pairs:
        assert {pp.a.subject_id, pp.b.subject_id} == {"a", "b"}
        assert pp.a.location == pp.b.location
        assert pp.a.window[0, 0, 0] == {"a": 0.0, "b": 1.0}[pp.a.subject_id]


def test_sample_pairs_needs_two():
    vols, masks = _subjects(1)
    with pytest.raises(ValueError):
        sample_pairs(vols, masks, 3, 3, 0)
    with pytest.raises(ValueError):
        sample_pair_arrays(vols, masks, 3, 3, 0)


def test_sample_pairs_deterministic():
    vols, masks = _subjects(3)
    a = pair_arrays(sample_pairs(vols, masks, 20, 3, 5))
    b = pair_arrays(sample_pairs(vols, masks, 20, 3, 5))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@pytest.mark.parametrize("sampler", ["objects", "arrays"])
def test_subject_pair_frequencies_uniform(sampler):
    vols, masks = _subjects(4, (3, 3, 1))
    n = 10**5 if sampler == "arrays" else 20000
    if sampler == "arrays":
        a, b = sample_pair_arrays(vols, masks, n, 3, 11)
    else:
        a, b = pair_arrays(sample_pairs(vols, masks, n, 3, 11))
    i, j = a[:, 0, 1, 1].astype(int), b[:, 0, 1, 1].astype(int)
    assert np.all(i != j)
    key = np.minimum(i, j) * 4 + np.maximum(i, j)
    freqs = np.array([np.mean(key == u) for u in np.unique(key)])
    assert len(freqs) == 6
    tol = 0.01 if sampler == "arrays" else 0.02
    assert np.all(np.abs(freqs - 1 / 6) < tol)


def test_pair_arrays_share_locations():
    ramp = _ramp((11, 11, 2), 1)
    vols = [Volume(ramp.data + 100 * i) for i in range(3)]
    a, b = sample_pair_arrays(vols, [np.ones((11, 11, 2), bool)] * 3, 200, 5, 2)
    # the ramp encodes x; subject offsets are multiples of 100
    np.testing.assert_array_equal(a % 100, b % 100)
