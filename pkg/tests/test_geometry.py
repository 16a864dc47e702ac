from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from czplab.errors import InvalidArgument
from czplab.geometry import (INTERIOR, X_BOUND, Y_BOUND, DesignSpace, DesignVector, from_pgm,
                             image_statistics, rasterize, rasterize_rectangles, sample_design,
                             to_pgm)

SPACE = DesignSpace()


def test_hand_example_bit_exact():
    img = rasterize_rectangles([[2.3, 1.6, 4.9, 3.2]], 30, 6, 1).channels
    assert img[X_BOUND, 1, 2] == 0.7 and img[X_BOUND, 3, 2] == 0.7
    assert img[X_BOUND, 2, 4] == 0.9
    assert img[Y_BOUND, 1, 2] == 0.4 and img[Y_BOUND, 1, 4] == 0.4
    assert img[Y_BOUND, 3, 3] == 0.2
    assert np.argwhere(img[INTERIOR] == 1).tolist() == [[2, 3]]


def test_integer_aligned_patch():
    img = rasterize_rectangles([[1.0, 1.0, 3.0, 3.0]], 30, 6, 1).channels
    assert img[X_BOUND, 2, 1] == 1.0
    assert img[X_BOUND, 2, 3] == 0.0
    assert np.argwhere(img[INTERIOR] == 1).tolist() == [[2, 2]]


def test_clipping_past_substrate_edge():
    img = rasterize_rectangles([[28.0, 1.0, 33.0, 4.5]], 30, 6, 1)
    assert img.channels.shape == (3, 6, 30)
    assert img.channels[INTERIOR, 2, 29] == 1.0
    # the substrate edge is not redrawn as a boundary
    assert img.channels[X_BOUND, :, 29].max() == 0.0


def test_canonical_dimensions():
    img = rasterize(SPACE, sample_design(SPACE, 0))
    assert img.channels.shape == (3, 60, 300)
    assert img.resolution == 10


def test_empty_design_is_blank():
    img = rasterize_rectangles(np.zeros((0, 4)), 30, 6, 10)
    stats = image_statistics(img)
    assert all(stats[c]["max"] == 0.0 for c in ("x_boundary", "y_boundary", "interior"))


def test_full_substrate_interior_area():
    # the right/top edge index floor(S*res) equals W/H and is clipped, so only
    # column 0 and row 0 carry boundaries: area is (H-1)(W-1)
    img = rasterize_rectangles([[0.0, 0.0, 30.0, 6.0]], 30, 6, 10)
    assert image_statistics(img)["interior_area"] == 59 * 299


def test_overlapping_patches_merge():
    img = rasterize_rectangles([[1.0, 1.0, 4.0, 4.0], [2.5, 1.0, 6.0, 4.0]], 30, 6, 1).channels
    # the second patch's left edge (column 2) lies inside the first patch's interior
    assert img[X_BOUND, 2, 2] == 0.0
    assert img[INTERIOR, 2, 2] == 1.0


def test_translation_by_one_pixel():
    a = rasterize_rectangles([[2.34, 1.27, 7.81, 3.66]], 30, 6, 10).channels
    b = rasterize_rectangles([[2.44, 1.27, 7.91, 3.66]], 30, 6, 10).channels
    assert np.array_equal(np.roll(a, 1, axis=2), b)


def test_enlarging_beyond_substrate_keeps_inner_pixels():
    a = rasterize_rectangles([[25.0, 1.0, 29.5, 3.0]], 30, 6, 10).channels
    b = rasterize_rectangles([[25.0, 1.0, 32.0, 3.0]], 30, 6, 10).channels
    assert np.array_equal(a[:, :, :295], b[:, :, :295])
    assert b[X_BOUND, :, 295:].max() == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_channel_invariants(seed):
    img = rasterize(SPACE, sample_design(SPACE, seed)).channels
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert set(np.unique(img[INTERIOR])) <= {0.0, 1.0}
    inside = img[INTERIOR] == 1
    assert not np.any(img[X_BOUND][inside]) and not np.any(img[Y_BOUND][inside])


def test_interior_area_bounded_by_patch_areas():
    for seed in range(20):
        d = sample_design(SPACE, seed)
        union = image_statistics(rasterize(SPACE, d))["interior_area"]
        single = sum(image_statistics(rasterize_rectangles([r], 30, 6, 10))["interior_area"]
                     for r in SPACE.rectangles(d))
        assert union <= single


def test_sampling_deterministic_and_in_range():
    assert sample_design(SPACE, 5) == sample_design(SPACE, 5)
    flats = np.array([sample_design(SPACE, [9, i]).flat() for i in range(10_000)])
    assert np.all(flats[:, 1] == 0.5)
    assert np.all(flats >= SPACE.lower) and np.all(flats <= SPACE.upper)
    lo, hi = flats[:, 2].min(), flats[:, 2].max()
    assert (hi - lo) >= 0.99 * 12.36


def test_design_validation_rejects_out_of_range():
    loc = sample_design(SPACE, 1).locations.copy()
    loc[1, 0] = 99.0
    with pytest.raises(InvalidArgument) as info:
        SPACE.design(loc)
    assert info.value.context["index"] == 2


def test_clamp_patch_two_corner():
    flat = SPACE.clamp(np.full(10, 99.0))
    assert flat[2:4].tolist() == [12.36, 4.7]


def test_design_json_and_port():
    d = sample_design(SPACE, 2)
    back = DesignVector.from_dict(json.loads(d.to_json()))
    assert back == d and hash(back) == hash(d)
    assert SPACE.port(d) == tuple(d.locations[0])


def test_pgm_round_trip():
    img = rasterize(SPACE, sample_design(SPACE, 4)).channels
    blob = to_pgm(img[X_BOUND])
    assert blob.startswith(b"P5\n300 60\n255\n")
    back = from_pgm(blob)
    assert np.max(np.abs(back - img[X_BOUND])) <= 0.5 / 255 + 1e-12
