import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynquery.autograd import DimensionError, Tensor
from dynquery.pyramid import Backbone, BackboneConfig, PyramidLevel, extract_pyramid, flatten_levels, unflatten_levels


def _levels(shapes, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return [PyramidLevel(i + 1, Tensor(rng.standard_normal((d, h, w))), 2 ** (i + 1)) for i, (h, w) in enumerate(shapes)]


def test_pyramid_shapes_64px():
    rng = np.random.default_rng(0)
    backbone = Backbone(BackboneConfig(dim=32, num_levels=3), rng)
    levels = extract_pyramid(Tensor(rng.standard_normal((3, 64, 64))), backbone)
    assert [lv.map.shape for lv in levels] == [(32, 32, 32), (32, 16, 16), (32, 8, 8)]
    assert [lv.stride for lv in levels] == [2, 4, 8]


def test_pyramid_zero_image_is_finite():
    backbone = Backbone(BackboneConfig(dim=8, num_levels=2), np.random.default_rng(1))
    levels = backbone(Tensor(np.zeros((3, 16, 16))))
    assert all(np.all(np.isfinite(lv.map.data)) for lv in levels)


def test_pyramid_single_level():
    backbone = Backbone(BackboneConfig(dim=4, num_levels=1), np.random.default_rng(2))
    (level,) = backbone(Tensor(np.ones((3, 8, 8))))
    assert level.stride == 2 and level.map.shape == (4, 4, 4)


def test_pyramid_halving_invariant():
    backbone = Backbone(BackboneConfig(dim=4, num_levels=4), np.random.default_rng(3))
    levels = backbone(Tensor(np.ones((3, 32, 48))))
    for a, b in zip(levels, levels[1:]):
        assert b.shape == (-(-a.shape[0] // 2), -(-a.shape[1] // 2))
        assert b.stride == 2 * a.stride
        assert a.map.shape[0] == b.map.shape[0]


def test_pyramid_rejects_indivisible_size():
    backbone = Backbone(BackboneConfig(dim=4, num_levels=3), np.random.default_rng(4))
    with pytest.raises(ValueError):
        backbone(Tensor(np.zeros((3, 20, 20))))


def test_flatten_two_levels_ranges():
    flat = flatten_levels(_levels([(2, 2), (1, 1)]))
    assert flat.length == 5
    assert flat.level_ranges == [(0, 4), (4, 5)]


def test_flatten_single_level_covers_sequence():
    flat = flatten_levels(_levels([(3, 5)]))
    assert flat.level_ranges == [(0, 15)]


def test_flatten_mismatched_channels():
    levels = _levels([(2, 2)], d=3) + [PyramidLevel(2, Tensor(np.zeros((4, 1, 1))), 4)]
    with pytest.raises(DimensionError):
        flatten_levels(levels)


def test_unflatten_length_mismatch():
    flat = flatten_levels(_levels([(2, 2), (1, 1)]))
    with pytest.raises(DimensionError):
        unflatten_levels(flat, [(2, 2), (2, 1)])


shapes = st.lists(st.tuples(st.integers(1, 6), st.integers(1, 6)), min_size=1, max_size=4)


@settings(max_examples=100, deadline=None)
@given(shapes, st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_flatten_unflatten_roundtrip(level_shapes, d, seed):
    levels = _levels(level_shapes, d=d, seed=seed)
    flat = flatten_levels(levels)
    spans = flat.level_ranges
    assert spans[0][0] == 0 and spans[-1][1] == flat.length
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    back = unflatten_levels(flat, level_shapes)
    for orig, rec in zip(levels, back):
        np.testing.assert_array_equal(orig.map.data, rec.map.data)


@settings(max_examples=50, deadline=None)
@given(shapes)
def test_sequence_positions_are_unique(level_shapes):
    flat = flatten_levels(_levels(level_shapes, d=1))
    seen = set()
    for idx in range(flat.length):
        pos = flat.position_of(idx)
        level, y, x = pos
        h, w = level_shapes[level - 1]
        assert 0 <= y < h and 0 <= x < w
        assert flat.index_of(*pos) == idx
        seen.add(pos)
    assert len(seen) == flat.length
