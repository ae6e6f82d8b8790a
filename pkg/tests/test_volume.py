import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from latentuad.volume import (
    LabelAtlas,
    NormalizationStats,
    Volume,
    VolumeFormatError,
    brain_mask,
    fit_normalization,
    load_atlas,
    normalize,
    read_label_names,
    read_nifti,
    read_raw,
    save_volume,
    write_label_names,
    write_raw,
)

from conftest import nifti_bytes


def test_volume_rejects_empty_dims():
    with pytest.raises(ValueError):
        Volume(np.zeros((0, 2, 2, 1)))


def test_volume_rejects_nonfinite_and_bad_voxel_size():
    with pytest.raises(ValueError):
        Volume(np.array([[[np.nan]]]))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))


def test_volume_is_read_only():
    v = Volume(np.zeros((2, 2, 2, 1)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0, 0] = 1.0


# --- NIfTI -----------------------------------------------------------------


def test_nifti_float32_identity_when_slope_zero(rng):
    a = rng.normal(size=(2, 2, 2)).astype(np.float32)
    v = read_nifti(nifti_bytes(a))
    assert v.dims == (2, 2, 2) and v.channels == 1
    np.testing.assert_array_equal(v.data[..., 0], a.astype(np.float64))


def test_nifti_slope_and_intercept(rng):
    a = rng.normal(size=(2, 2, 2)).astype(np.float32)
    v = read_nifti(nifti_bytes(a, slope=2.0, inter=1.0))
    np.testing.assert_allclose(v.data[..., 0], 2.0 * a.astype(np.float64) + 1.0, rtol=0, atol=0)


@pytest.mark.parametrize("datatype", [4, 8, 16, 64])
def test_nifti_big_endian_twin_matches(rng, datatype):
    a = rng.integers(-300, 300, size=(3, 4, 2, 2))
    little = read_nifti(nifti_bytes(a, "<", datatype, pixdim=(1.5, 2.0, 2.5)))
    big = read_nifti(nifti_bytes(a, ">", datatype, pixdim=(1.5, 2.0, 2.5)))
    assert little == big
    assert little.voxel_size_mm == (1.5, 2.0, 2.5)
    assert little.channels == 2
    np.testing.assert_array_equal(little.data, a.astype(np.float64))


def test_nifti_column_major_layout():
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    v = read_nifti(nifti_bytes(a))
    assert v.data[1, 2, 3, 0] == a[1, 2, 3]


def test_nifti_errors():
    good = nifti_bytes(np.zeros((2, 2, 2), np.float32))
    bad = bytearray(good)
    bad[0:4] = (349).to_bytes(4, "little")
    with pytest.raises(VolumeFormatError, match="348"):
        read_nifti(bytes(bad))
    bad = bytearray(good)
    bad[70:72] = (2).to_bytes(2, "little")
    with pytest.raises(VolumeFormatError, match="datatype"):
        read_nifti(bytes(bad))
    with pytest.raises(VolumeFormatError, match="expected 32 bytes, found 28"):
        read_nifti(good[:-4])


# --- raw container ---------------------------------------------------------


def test_raw_roundtrip_small(rng):
    v = Volume(rng.normal(size=(3, 3, 3, 2)).astype(np.float32), (1.0, 1.5, 2.0))
    w = read_raw(write_raw(v))
    assert w == v
    assert write_raw(w) == write_raw(v)


def test_raw_roundtrip_paper_scale(rng):
    a = rng.normal(size=(121, 145, 121, 3)).astype(np.float32)
    v = Volume(a, (1.5, 1.5, 1.5))
    buf = write_raw(v)
    w = read_raw(buf)
    np.testing.assert_array_equal(w.data, v.data)
    assert write_raw(w) == buf


def test_raw_layout_is_voxel_major():
    a = np.arange(2 * 3 * 1 * 2, dtype=np.float32).reshape(2, 3, 1, 2)
    body = write_raw(Volume(a))[-a.size * 4:]
    np.testing.assert_array_equal(np.frombuffer(body, "<f4"), a.ravel())


def test_raw_errors():
    buf = write_raw(Volume(np.zeros((2, 2, 2, 1))))
    with pytest.raises(VolumeFormatError, match="magic"):
        read_raw(b"XXXX" + buf[4:])
    with pytest.raises(VolumeFormatError, match="version"):
        read_raw(buf[:4] + (7).to_bytes(4, "little") + buf[8:])
    with pytest.raises(VolumeFormatError, match="length"):
        read_raw(buf[:-1])


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=4, max_dims=4, max_side=5),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_raw_roundtrip_property(a):
    v = Volume(a)
    assert write_raw(read_raw(write_raw(v))) == write_raw(v)
    np.testing.assert_array_equal(read_raw(write_raw(v)).data, a.astype(np.float64))


# --- normalization ---------------------------------------------------------


def test_fit_normalization_uniform_ramp():
    v = Volume(np.arange(101, dtype=np.float64).reshape(101, 1, 1))
    s = fit_normalization([v])
    pooled = np.sort(np.arange(101.0))
    # linear interpolation at rank q * (n - 1)
    assert s.q01 == (pooled[1],) and s.q99 == (pooled[99],)


def test_fit_normalization_pooling_equals_concatenation(rng):
    a = rng.normal(size=(4, 5, 6, 2))
    b = rng.normal(size=(4, 5, 3, 2))
    s2 = fit_normalization([Volume(a), Volume(b)])
    s1 = fit_normalization([Volume(np.concatenate([a, b], axis=2))])
    assert s1 == s2


def test_fit_normalization_degenerate_channel():
    d = np.zeros((3, 3, 3, 2))
    d[..., 0] = np.arange(27).reshape(3, 3, 3)
    with pytest.raises(ValueError, match="channel 1"):
        fit_normalization([Volume(d)])


def test_fit_normalization_channel_mismatch():
    with pytest.raises(ValueError):
        fit_normalization([Volume(np.ones((2, 2, 2, 1))), Volume(np.ones((2, 2, 2, 2)))])


def test_normalization_stats_invariant():
    with pytest.raises(ValueError):
        NormalizationStats((1.0,), (1.0,))


def test_normalize_endpoints_and_formula(rng):
    s = NormalizationStats((2.0, -1.0), (6.0, 3.0))
    v = Volume(np.array([[[[2.0, -1.0], [6.0, 3.0], [4.0, 1.0], [10.0, -5.0]]]]))
    out = normalize(v, s).data[0, 0]
    np.testing.assert_allclose(out, [[0, 0], [1, 1], [0.5, 0.5], [2.0, -1.0]])
    x = rng.normal(size=(3, 4, 5, 2))
    direct = (x - np.array([2.0, -1.0])) / np.array([4.0, 4.0])
    np.testing.assert_allclose(normalize(Volume(x), s).data, direct, rtol=1e-15)


def test_normalize_channel_mismatch():
    with pytest.raises(ValueError):
        normalize(Volume(np.ones((2, 2, 2, 2))), NormalizationStats((0.0,), (1.0,)))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 10), st.floats(-5, 5), st.integers(0, 2**31))
def test_normalize_affine_invariance(a, b, seed):
    x = np.random.default_rng(seed).normal(size=(4, 4, 4, 2))
    v, w = Volume(x), Volume(a * x + b)
    lhs = normalize(w, fit_normalization([w])).data
    rhs = normalize(v, fit_normalization([v])).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


# --- masks and atlases -----------------------------------------------------


def test_brain_mask_cases():
    assert not brain_mask(Volume(np.zeros((3, 3, 3, 2)))).any()
    d = np.zeros((3, 3, 3, 2))
    d[1, 2, 0, 1] = 0.5
    m = brain_mask(Volume(d), 0.1)
    assert m.sum() == 1 and m[1, 2, 0]
    d[0, 0, 0, 0] = -0.05
    assert brain_mask(Volume(d), 0.1).sum() == 1
    assert brain_mask(Volume(d), 0.0).sum() == 2
    with pytest.raises(ValueError):
        brain_mask(Volume(d), -1.0)


def test_label_atlas_requires_names():
    labels = np.array([[[0, 1, 2]]])
    with pytest.raises(ValueError):
        LabelAtlas(labels, {1: "a"})
    assert LabelAtlas(labels, {1: "a", 2: "b"}).dims == (1, 1, 3)


def test_atlas_files_roundtrip(tmp_path):
    labels = np.array([[[0, 1], [2, 2]]], dtype=np.float64)
    save_volume(tmp_path / "atlas.raw", Volume(labels))
    write_label_names(tmp_path / "names.tsv", {1: "left", 2: "right side"})
    assert read_label_names(tmp_path / "names.tsv") == {1: "left", 2: "right side"}
    at = load_atlas(tmp_path / "atlas.raw", tmp_path / "names.tsv")
    np.testing.assert_array_equal(at.labels, labels.astype(int))
