import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from distdeblur.imaging import chop
from distdeblur.partition import build_layout, build_weights, overlap_pairs, parse_manifest, manifest_text


def _layout(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_layout(*args, **kw)


def test_one_dimensional_three_patches():
    lay = _layout(1, 101, 1, 3, 1, "smooth_variant")
    g = lay.grid_x
    assert g == (0, 50, 100)
    left, mid, right = (b.observed for b in lay)
    # the middle patch spans all three grid points, each side patch reaches the middle one
    assert (mid.left, mid.right) == (g[0], g[2] + 1)
    assert left.right - 1 == g[1] and right.left == g[1]
    assert left.right - mid.left == (mid.width + 1) // 2


def test_interior_patch_spans_three_grid_points():
    lay = _layout(1, 201, 1, 5, 1, "smooth_variant")
    g = lay.grid_x
    b = lay[2].observed
    assert (b.left, b.right - 1) == (g[1], g[3])
    for nb in (lay[1].observed, lay[3].observed):
        shared = b.intersect(nb)
        assert abs(shared.width - b.width / 2) <= 1


def test_single_block_covers_estimate_domain():
    lay = build_layout(30, 40, 1, 1, 5, "shift_invariant")
    assert len(lay) == 1 and lay[0].neighbors == ()
    assert lay[0].estimate.shape == lay.estimate_shape == (34, 44)
    assert overlap_pairs(lay) == []
    np.testing.assert_array_equal(build_weights(lay)[0], 1.0)


@pytest.mark.parametrize("grid", [(1, 1), (2, 2), (3, 3), (4, 3)])
@pytest.mark.parametrize("regime", ["shift_invariant", "smooth_variant", "piecewise"])
def test_partition_of_unity_and_coverage(grid, regime):
    lay = _layout(90, 80, *grid, 7, regime)
    w = build_weights(lay)
    assert np.max(np.abs(w.total() - 1)) <= 1e-12
    assert lay.coverage().min() >= 1
    for wi in w.weights:
        assert wi.min() >= 0 and wi.max() <= 1


def test_reconstruction_identity(rng):
    lay = _layout(60, 70, 3, 4, 5, "smooth_variant")
    w = build_weights(lay)
    x = rng.random(lay.estimate_shape)
    out = np.zeros_like(x)
    for b in lay:
        out[b.estimate.slices] += w[b.index] * chop(x, b.estimate)
    assert np.max(np.abs(out - x)) <= 1e-12 * np.max(np.abs(x))


def test_center_weight_is_pyramid():
    lay = build_layout(61, 61, 3, 3, 1, "smooth_variant")
    w = build_weights(lay)[4]
    b = lay[4]
    gy, gx = b.grid_point
    top, left = b.estimate.top, b.estimate.left
    assert w[gy - top, gx - left] == 1.0 and w.max() == 1.0
    for y in lay.grid_y[::2]:
        assert np.all(w[y - top, :] == 0)
    for x in lay.grid_x[::2]:
        assert np.all(w[:, x - left] == 0)
    # separable product of 1D hats
    np.testing.assert_allclose(w, np.outer(w[:, gx - left], w[gy - top, :]), atol=1e-15)


def _brute_pairs(lay):
    out = []
    for i, j in itertools.combinations(range(len(lay)), 2):
        a, b = lay[i].estimate, lay[j].estimate
        if max(a.top, b.top) < min(a.bottom, b.bottom) and max(a.left, b.left) < min(a.right, b.right):
            out.append((i, j))
    return out


def test_two_by_two_has_six_pairs():
    lay = build_layout(100, 100, 2, 2, 5, "smooth_variant")
    pairs = overlap_pairs(lay)
    assert len(pairs) == 6
    assert [(p.i, p.j) for p in pairs] == _brute_pairs(lay)


@pytest.mark.parametrize("grid", [(3, 3), (4, 3), (2, 5)])
def test_pairs_match_enumeration_and_are_symmetric(grid):
    lay = _layout(80, 90, *grid, 5, "smooth_variant")
    pairs = overlap_pairs(lay)
    assert [(p.i, p.j) for p in pairs] == _brute_pairs(lay)
    for p in pairs:
        assert lay.shared_region(p.i, p.j) == lay.shared_region(p.j, p.i) == p.shared
        assert p.local_i.shape == p.local_j.shape == p.shared.shape
        assert p.j in lay[p.i].neighbors and p.i in lay[p.j].neighbors


def test_three_by_three_four_way_sharing():
    lay = build_layout(91, 91, 3, 3, 5, "smooth_variant")
    count = np.zeros(lay.observed_shape, dtype=int)
    for b in lay:
        count[b.observed.slices] += 1
    off_grid_y = [y for y in range(91) if y not in lay.grid_y]
    off_grid_x = [x for x in range(91) if x not in lay.grid_x]
    assert np.all(count[np.ix_(off_grid_y, off_grid_x)] == 4)
    w = build_weights(lay)
    positive = sum((w.global_weight(i) > 0).astype(int) for i in range(len(lay)))
    assert positive.max() == 4
    assert len(lay[4].neighbors) == 8


def test_disjoint_tiling_with_zero_overlap():
    lay = build_layout(50, 47, 3, 2, 5, "shift_invariant", 0)
    count = np.zeros(lay.observed_shape, dtype=int)
    for b in lay:
        count[b.observed.slices] += 1
    np.testing.assert_array_equal(count, 1)


def test_default_tile_overlap_slightly_above_half_psf():
    lay = build_layout(200, 200, 2, 2, 31, "shift_invariant")
    assert lay.overlap == 17
    assert lay[0].observed.bottom - lay[2].observed.top == 17


def test_layout_errors():
    with pytest.raises(ValueError):
        build_layout(50, 50, 0, 1, 5)
    with pytest.raises(ValueError):
        build_layout(50, 50, 2, 2, 5, "shift_invariant", 40)
    with pytest.raises(ValueError):
        build_layout(50, 50, 2, 2, 4)
    with pytest.raises(ValueError):
        build_layout(50, 50, 2, 2, 5, "radial")
    with pytest.warns(UserWarning):
        build_layout(50, 50, 3, 3, 15)


@pytest.mark.parametrize("regime,overlap", [("smooth_variant", None), ("shift_invariant", 9)])
def test_manifest_roundtrip(regime, overlap):
    lay = _layout(70, 64, 3, 2, 7, regime, overlap)
    addr = {i: ("127.0.0.1", 5000 + i) for i in range(len(lay))}
    back, got = parse_manifest(manifest_text(lay, addr))
    assert back.blocks == lay.blocks and got == addr
    assert parse_manifest(manifest_text(lay))[1] is None


def test_manifest_inconsistent_block():
    lay = build_layout(40, 40, 1, 2, 3, "smooth_variant")
    text = manifest_text(lay).replace("observed=0,0,", "observed=1,0,", 1)
    with pytest.raises(ValueError):
        parse_manifest(text)


@given(st.integers(20, 120), st.integers(20, 120), st.integers(1, 4), st.integers(1, 4),
       st.sampled_from([1, 3, 5, 7]), st.sampled_from(["shift_invariant", "smooth_variant"]))
def test_partition_of_unity_property(h, w, rows, cols, p, regime):
    lay = _layout(h, w, rows, cols, p, regime)
    assert np.max(np.abs(build_weights(lay).total() - 1)) <= 1e-12
    assert lay.coverage().min() >= 1
