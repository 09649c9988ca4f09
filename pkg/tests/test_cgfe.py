import numpy as np
import pytest

from dynquery.autograd import DimensionError, Tensor
from dynquery.cgfe import CGFE, apply_channel, apply_spatial, channel_attention, downsample_counting, spatial_attention
from dynquery.counting import ConfigError, DensityMap
from dynquery.gradcheck import grad_check
from dynquery.nn import MLP, Conv2d
from dynquery.ops import resize_bilinear
from dynquery.pyramid import PyramidLevel

from oracles import bilinear_loop


def _zero_biases(module):
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data = np.zeros_like(p.data)


def test_downsample_level_one_keeps_resolution():
    rng = np.random.default_rng(0)
    fc = Tensor(rng.standard_normal((4, 8, 8)))
    mixer = Conv2d(4, 4, 1, rng)
    (out,) = downsample_counting(fc, [(8, 8)], [mixer])
    assert out.shape == (4, 8, 8)
    np.testing.assert_allclose(out.data, mixer(fc.reshape(1, 4, 8, 8)).data[0], atol=1e-14)


def test_downsample_constant_map_stays_constant():
    rng = np.random.default_rng(1)
    fc = Tensor(np.broadcast_to(rng.standard_normal((3, 1, 1)), (3, 8, 8)).copy())
    mixers = [Conv2d(3, 3, 1, rng) for _ in range(3)]
    for out in downsample_counting(fc, [(8, 8), (4, 4), (2, 2)], mixers):
        np.testing.assert_allclose(out.data, np.broadcast_to(out.data[:, :1, :1], out.shape), atol=1e-14)


def test_bilinear_halving_hand_values():
    img = np.arange(16.0).reshape(4, 4)
    out = resize_bilinear(Tensor(img), 2, 2).data
    np.testing.assert_allclose(out, [[2.5, 4.5], [10.5, 12.5]], atol=1e-14)
    np.testing.assert_allclose(out, bilinear_loop(img, 2, 2), atol=1e-14)


def test_bilinear_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        h, w = rng.integers(1, 9, size=2)
        oh, ow = rng.integers(1, 9, size=2)
        img = rng.standard_normal((h, w))
        np.testing.assert_allclose(resize_bilinear(Tensor(img), oh, ow).data, bilinear_loop(img, oh, ow), atol=1e-12)


def test_spatial_attention_shape_and_range():
    rng = np.random.default_rng(3)
    w_s = spatial_attention(Tensor(rng.standard_normal((32, 8, 8))), Conv2d(32, 32, 1, rng), Conv2d(2, 1, 7, rng, padding=3))
    assert w_s.shape == (1, 8, 8)
    assert np.all((w_s.data > 0) & (w_s.data < 1))


def test_spatial_attention_zero_input_is_half():
    rng = np.random.default_rng(4)
    reduce, conv7 = Conv2d(4, 4, 1, rng), Conv2d(2, 1, 7, rng, padding=3)
    w_s = spatial_attention(Tensor(np.zeros((4, 5, 5))), reduce, conv7)
    assert np.all(w_s.data == 0.5)


def test_spatial_attention_any_size():
    rng = np.random.default_rng(5)
    w_s = spatial_attention(Tensor(rng.standard_normal((4, 1, 1))), Conv2d(4, 4, 1, rng), Conv2d(2, 1, 7, rng, padding=3))
    assert w_s.shape == (1, 1, 1)


def test_spatial_attention_gradient():
    rng = np.random.default_rng(6)
    reduce, conv7 = Conv2d(3, 3, 1, rng), Conv2d(2, 1, 7, rng, padding=3)
    x = Tensor(rng.standard_normal((3, 4, 4)))
    report = grad_check(lambda f, *p: spatial_attention(f, reduce, conv7), [x, *reduce.parameters(), *conv7.parameters()], max_entries=40)
    assert report.max_rel_error < 1e-4


def test_apply_spatial_identity_and_half():
    s = np.random.default_rng(7).standard_normal((4, 3, 5))
    np.testing.assert_array_equal(apply_spatial(Tensor(np.ones((1, 3, 5))), Tensor(s)).data, s)
    np.testing.assert_array_equal(apply_spatial(Tensor(np.full((1, 3, 5), 0.5)), Tensor(s)).data, s / 2)


def test_apply_spatial_loop_oracle():
    rng = np.random.default_rng(8)
    for _ in range(100):
        d, h, w = rng.integers(1, 5, size=3)
        ws, s = rng.uniform(size=(1, h, w)), rng.standard_normal((d, h, w))
        out = apply_spatial(Tensor(ws), Tensor(s)).data
        for c in range(d):
            for y in range(h):
                for x in range(w):
                    assert out[c, y, x] == ws[0, y, x] * s[c, y, x]


def test_apply_spatial_shape_mismatch():
    with pytest.raises(DimensionError):
        apply_spatial(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((3, 2, 3))))


def test_channel_attention_zero_input_is_half():
    mlp = MLP([8, 2, 8], np.random.default_rng(9))
    _zero_biases(mlp)
    w_c = channel_attention(Tensor(np.zeros((8, 3, 3))), mlp)
    assert w_c.shape == (8, 1, 1)
    assert np.all(w_c.data == 0.5)


def test_channel_attention_single_cell_doubles_mlp():
    rng = np.random.default_rng(10)
    mlp = MLP([4, 2, 4], rng)
    x = rng.standard_normal(4)
    w_c = channel_attention(Tensor(x.reshape(4, 1, 1)), mlp).data.reshape(4)
    expected = 1 / (1 + np.exp(-2 * mlp(Tensor(x)).data))
    np.testing.assert_allclose(w_c, expected, atol=1e-15)


def test_channel_attention_gradient():
    rng = np.random.default_rng(11)
    mlp = MLP([4, 2, 4], rng)
    e = Tensor(rng.standard_normal((4, 3, 3)))
    assert grad_check(lambda x, *p: channel_attention(x, mlp), [e, *mlp.parameters()]).max_rel_error < 1e-4


def test_apply_channel_identity_and_zeroed_channel():
    rng = np.random.default_rng(12)
    e = rng.standard_normal((3, 2, 2))
    np.testing.assert_array_equal(apply_channel(Tensor(np.ones((3, 1, 1))), Tensor(e)).data, e)
    gate = np.ones((3, 1, 1))
    gate[1] = 0.0
    out = apply_channel(Tensor(gate), Tensor(e)).data
    assert np.all(out[1] == 0)
    np.testing.assert_array_equal(out[[0, 2]], e[[0, 2]])


def test_apply_channel_loop_oracle():
    rng = np.random.default_rng(13)
    for _ in range(100):
        d, h, w = rng.integers(1, 5, size=3)
        wc, e = rng.uniform(size=(d, 1, 1)), rng.standard_normal((d, h, w))
        out = apply_channel(Tensor(wc), Tensor(e)).data
        for c in range(d):
            for y in range(h):
                for x in range(w):
                    assert out[c, y, x] == wc[c, 0, 0] * e[c, y, x]


def test_apply_channel_mismatch():
    with pytest.raises(DimensionError):
        apply_channel(Tensor(np.ones((2, 1, 1))), Tensor(np.ones((3, 2, 2))))


def test_reduction_must_divide_width():
    with pytest.raises(ConfigError):
        CGFE(10, 2, np.random.default_rng(0), reduction=4)


def _block_inputs(seed=14, dim=8):
    rng = np.random.default_rng(seed)
    block = CGFE(dim, 3, rng, reduction=4)
    density = DensityMap(Tensor(rng.standard_normal((dim, 8, 8))))
    levels = [PyramidLevel(i + 1, Tensor(rng.standard_normal((dim, s, s)) * 3), 2 ** (i + 1)) for i, s in enumerate((8, 4, 2))]
    return block, density, levels


def test_cgfe_preserves_shapes_and_attenuates():
    block, density, levels = _block_inputs()
    out, maps = block(density, levels)
    for f_t, s, w_s, w_c in zip(out.levels, levels, maps.spatial, maps.channel):
        assert f_t.shape == s.map.shape
        assert np.all((w_s.data > 0) & (w_s.data < 1))
        assert np.all((w_c.data > 0) & (w_c.data < 1))
        assert np.all(np.abs(f_t.data) <= np.abs(s.map.data))


def test_spatial_gating_precedes_channel_gating():
    """Channel weights depend on the spatially gated map, so swapping the order changes the output."""
    block, density, levels = _block_inputs(seed=15)
    # one strong spike that the spatial gate will mostly suppress or keep
    levels[0].map.data[:, 0, 0] = 25.0
    out, maps = block(density, levels)
    s, w_s = levels[0].map, maps.spatial[0]
    spatial_first = apply_channel(channel_attention(apply_spatial(w_s, s), block.channel_mlps[0]), apply_spatial(w_s, s))
    np.testing.assert_array_equal(out.levels[0].data, spatial_first.data)
    channel_first = apply_spatial(w_s, apply_channel(channel_attention(s, block.channel_mlps[0]), s))
    assert np.max(np.abs(channel_first.data - spatial_first.data)) > 1e-3


def test_cgfe_full_block_gradient():
    rng = np.random.default_rng(16)
    block = CGFE(4, 2, rng, reduction=2)
    fc = Tensor(rng.standard_normal((4, 4, 4)))
    s1, s2 = Tensor(rng.standard_normal((4, 4, 4))), Tensor(rng.standard_normal((4, 2, 2)))

    def fn(f, a, b, *params):
        out, _ = block(DensityMap(f), [PyramidLevel(1, a, 2), PyramidLevel(2, b, 4)])
        return out.levels[1]

    report = grad_check(fn, [fc, s1, s2, *block.parameters()], max_entries=25)
    assert report.max_rel_error < 1e-4
