import numpy as np
import pytest
from hypothesis import given, strategies as st

from distdeblur.imaging import (
    Region, as_image, chop, embed_zero_pad, read_png, read_raw, unvec, vec, weighted_norm_sq, write_png,
    write_raw,
)
from distdeblur.partition import build_layout


def test_chop_whole_region_is_identity(rng):
    img = rng.random((5, 7))
    np.testing.assert_array_equal(chop(img, Region.whole(img.shape)), img)


def test_chop_ramp_center():
    img = np.arange(16, dtype=float).reshape(4, 4)
    np.testing.assert_array_equal(chop(img, Region(1, 1, 2, 2)), [[5, 6], [9, 10]])


def test_chop_out_of_bounds_names_coordinate():
    with pytest.raises(IndexError, match="bottom|right|top|left"):
        chop(np.zeros((4, 4)), Region(3, 0, 2, 2))


def test_block_sizes_for_large_three_by_three_tiling():
    with pytest.warns(UserWarning):
        lay = build_layout(1024, 1024, 3, 3, 201, "shift_invariant", 100)
    rows = [lay[3 * k].observed for k in range(3)]
    # tiles of 342/341/341 pixels, each seam widened by 50 pixels to either side
    assert [(r.top, r.height) for r in rows] == [(0, 392), (292, 441), (633, 391)]
    for a, b in zip(rows, rows[1:]):
        assert a.bottom - b.top == 100
    assert all(lay[k].estimate.height == lay[k].observed.height + 200 for k in range(9))


def test_embed_then_chop_is_identity(rng):
    img = rng.random((3, 4))
    r = Region(2, 1, 3, 4)
    np.testing.assert_array_equal(chop(embed_zero_pad(img, r, 8, 8), r), img)


def test_embed_single_pixel_corner():
    out = embed_zero_pad(np.ones((1, 1)), Region(0, 0, 1, 1), 3, 3)
    expected = np.zeros((3, 3))
    expected[0, 0] = 1
    np.testing.assert_array_equal(out, expected)


def test_embed_size_mismatch():
    with pytest.raises(ValueError):
        embed_zero_pad(np.ones((2, 2)), Region(0, 0, 3, 3), 5, 5)


def test_chop_embed_adjoint_random_pairs(rng):
    for _ in range(50):
        h, w = rng.integers(1, 9, size=2)
        top, left = rng.integers(0, 8 - h + 1), rng.integers(0, 8 - w + 1)
        r = Region(int(top), int(left), int(h), int(w))
        a = rng.standard_normal((8, 8))
        b = rng.standard_normal((h, w))
        lhs = np.sum(chop(a, r) * b)
        rhs = np.sum(a * embed_zero_pad(b, r, 8, 8))
        assert abs(lhs - rhs) <= 1e-12 * np.linalg.norm(a) * np.linalg.norm(b)


def test_weighted_norm_trivial_weights(rng):
    a = rng.standard_normal((4, 6))
    assert weighted_norm_sq(a, 1.0) == pytest.approx(np.sum(a * a), rel=1e-14)
    assert weighted_norm_sq(a, np.zeros_like(a)) == 0.0


def test_weighted_norm_vs_loop(rng):
    a, w = rng.standard_normal((5, 5)), rng.random((5, 5))
    total = 0.0
    for i in range(5):
        for j in range(5):
            total += w[i, j] * a[i, j] ** 2
    assert weighted_norm_sq(a, w) == pytest.approx(total, rel=1e-14)


def test_weighted_norm_shape_mismatch():
    with pytest.raises(ValueError):
        weighted_norm_sq(np.ones((2, 2)), np.ones((3, 3)))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_vec_roundtrip_and_row_major(h, w, seed):
    img = np.random.default_rng(seed).standard_normal((h, w))
    v = vec(img)
    assert v[min(1, w - 1)] == img[0, min(1, w - 1)]
    np.testing.assert_array_equal(unvec(v, (h, w)), img)


@given(st.integers(0, 2**31 - 1))
def test_weighted_norm_sqrt_identity(seed):
    g = np.random.default_rng(seed)
    a, w = g.standard_normal((4, 5)), g.random((4, 5))
    assert weighted_norm_sq(a, w) == pytest.approx(weighted_norm_sq(a * np.sqrt(w), 1.0), rel=1e-12)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 7), st.integers(0, 7), st.integers(0, 2**31 - 1))
def test_adjoint_identity_property(h, w, top, left, seed):
    top, left = min(top, 8 - h), min(left, 8 - w)
    g = np.random.default_rng(seed)
    r = Region(top, left, h, w)
    a, b = g.standard_normal((8, 8)), g.standard_normal((h, w))
    assert abs(np.sum(chop(a, r) * b) - np.sum(a * embed_zero_pad(b, r, 8, 8))) <= 1e-12 * (
        np.linalg.norm(a) * np.linalg.norm(b))


def test_as_image_rejects_nonfinite():
    with pytest.raises(ValueError):
        as_image(np.array([[1.0, np.nan]]))


def test_raw_roundtrip_bit_exact(tmp_path, rng):
    img = rng.standard_normal((7, 5)) * 1e3
    write_raw(tmp_path / "a.raw", img)
    data = (tmp_path / "a.raw").read_bytes()
    assert data[:4] == b"IMGF" and len(data) == 16 + 8 * img.size
    np.testing.assert_array_equal(read_raw(tmp_path / "a.raw"), img)


def test_raw_bad_magic(tmp_path):
    (tmp_path / "b.raw").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(ValueError):
        read_raw(tmp_path / "b.raw")


def test_png_scaled_to_photon_max(tmp_path):
    img = np.linspace(0, 6000, 20).reshape(4, 5)
    write_png(tmp_path / "a.png", img, 6000.0)
    back = read_png(tmp_path / "a.png", 6000.0)
    assert back.max() == pytest.approx(6000.0)
    np.testing.assert_allclose(back, img, atol=6000.0 / 65535)
