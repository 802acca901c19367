import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatedunipose import tensor as T
from gatedunipose import verify as V
from gatedunipose.blocks import (
    DEFAULT_BRANCHES,
    DilatedReparamBlock,
    DySampleUpsampler,
    GatedConv,
    GatedUniPoseBlock,
    GlaceEmbed,
    PlainDownsample,
    SqueezeExcite,
    default_branches,
    dilated_to_dense,
    merge_reparam,
)
from gatedunipose.exceptions import InvalidSpecError, ShapeError, StateError
from gatedunipose.tensor import ConvSpec, Tensor


@pytest.mark.parametrize("k,r", [(3, 2), (3, 3), (5, 2), (3, 5)])
def test_dilated_to_dense_matches_dilated_conv(k, r, rng, f64):
    w = rng.standard_normal((3, 1, k, k))
    x = rng.standard_normal((1, 3, 15, 15))
    pad = r * (k - 1) // 2
    dilated = T.conv2d(Tensor(x), Tensor(w), None, ConvSpec(3, 3, k, 1, pad, r, groups=3))
    dense = dilated_to_dense(w, r)
    assert dense.shape[-1] == (k - 1) * r + 1
    plain = T.conv2d(Tensor(x), Tensor(dense), None, ConvSpec(3, 3, dense.shape[-1], 1, pad, 1, groups=3))
    np.testing.assert_allclose(dilated.data, plain.data, atol=1e-12)


def test_dilated_to_dense_rejects_even_or_rectangular():
    with pytest.raises(InvalidSpecError):
        dilated_to_dense(np.zeros((1, 1, 4, 4)), 2)
    with pytest.raises(InvalidSpecError):
        dilated_to_dense(np.zeros((1, 1, 3, 5)), 2)


def test_default_branch_sets_fit_inside_main_kernel():
    for K, branches in DEFAULT_BRANCHES.items():
        assert all((k - 1) * r + 1 <= K for k, r in branches)
    assert default_branches(15) == DEFAULT_BRANCHES[7]
    with pytest.raises(InvalidSpecError):
        default_branches(5)


@pytest.mark.parametrize("K", [7, 9, 11, 13])
def test_merge_is_equivalent_f64(K, rng, f64):
    block = DilatedReparamBlock(3, K)
    block.reset_parameters(K)
    V.randomize_norm_statistics(block, rng)
    block.eval()
    x = Tensor(rng.standard_normal((2, 3, 20, 18)))
    before = block(x).data
    merge_reparam(block)
    assert block.deployed and block.branches == [] and block.main is None
    np.testing.assert_allclose(block(x).data, before, atol=1e-10)


def test_merged_block_has_single_kernel_parameter_set():
    block = DilatedReparamBlock(4, 7)
    block.eval()
    block.merge()
    names = [n for n, _ in block.named_parameters()]
    assert names == ["merged.weight", "merged.bias"]


def test_double_merge_is_state_error():
    block = DilatedReparamBlock(2, 7).eval()
    block.merge()
    with pytest.raises(StateError):
        block.merge()


def test_even_main_kernel_rejected():
    with pytest.raises(InvalidSpecError):
        DilatedReparamBlock(2, 8)
    with pytest.raises(InvalidSpecError):
        DilatedReparamBlock(2, 7, branches=[(5, 3)])


def test_gconv_saturation_and_bound():
    rows = V.gconv_suite(cases=20, seed=3)
    assert all(r.passed for r in rows), V.format_results(rows)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), c_in=st.integers(1, 4), c_out=st.integers(1, 4))
def test_gconv_elementwise_bound_property(seed, c_in, c_out):
    rng = np.random.default_rng(seed)
    layer = GatedConv(ConvSpec(c_in, c_out, 3, 1, 1))
    layer.reset_parameters(seed)
    V._perturb_parameters(layer, rng, 2.0)
    x = Tensor(rng.standard_normal((1, c_in, 5, 5)) * 3)
    assert np.all(np.abs(layer(x).data) <= np.abs(layer.value(x).data))


def test_gconv_shape_error():
    with pytest.raises(ShapeError):
        GatedConv(ConvSpec(2, 2, 1))(Tensor(np.zeros((1, 3, 4, 4))))


@pytest.mark.parametrize("s", [2, 4])
def test_dysample_zero_offsets_equal_bilinear(s, rng):
    up = DySampleUpsampler(3, s)
    up.reset_parameters(0)
    x = Tensor(rng.standard_normal((2, 3, 5, 7)))
    out = up(x)
    assert out.shape == (2, 3, 5 * s, 7 * s)
    np.testing.assert_allclose(out.data, T.bilinear_upsample(x, s).data, atol=1e-6)


def test_dysample_offsets_are_clamped(rng, f64):
    up = DySampleUpsampler(2, 2, offset_range=0.25)
    up.offset.weight.data = 100 * rng.standard_normal(up.offset.weight.shape)
    off = up.offsets(Tensor(rng.standard_normal((1, 2, 3, 3))))
    assert np.abs(off.data).max() <= 0.25 * 2 + 1e-12


def test_dysample_offset_layout(f64):
    # channel (axis, sy, sx) at input pixel (i, j) must move output pixel (i*s+sy, j*s+sx)
    s, h, w = 2, 2, 3
    up = DySampleUpsampler(1, s, offset_range=1.0)
    bias = np.zeros(2 * s * s)
    bias[0 * s * s + 1 * s + 0] = 0.3  # x offset for sub-position (sy=1, sx=0)
    up.offset.bias.data = bias
    off = up.offsets(Tensor(np.zeros((1, 1, h, w)))).data
    expected = np.zeros((h * s, w * s))
    expected[1::2, 0::2] = 0.3
    np.testing.assert_allclose(off[0, 0], expected)
    np.testing.assert_allclose(off[0, 1], 0.0)


def test_dysample_rejects_scale_one():
    with pytest.raises(InvalidSpecError):
        DySampleUpsampler(2, 1)


@pytest.mark.parametrize("stride,expected_units", [(2, 2), (4, 2), (8, 3)])
def test_glace_stem_shapes(stride, expected_units, rng):
    embed = GlaceEmbed(3, 8, stride)
    assert len(embed.units) == expected_units
    y = embed(Tensor(rng.standard_normal((1, 3, 16, 8))))
    assert y.shape == (1, 8, 16 // stride, 8 // stride)


def test_glace_rejects_indivisible_input():
    with pytest.raises(ShapeError):
        GlaceEmbed(3, 4, 4)(Tensor(np.zeros((1, 3, 10, 8))))
    with pytest.raises(InvalidSpecError):
        GlaceEmbed(3, 4, 3)


def test_plain_downsample_shape(rng):
    assert PlainDownsample(3, 5, 4)(Tensor(rng.standard_normal((1, 3, 8, 12)))).shape == (1, 5, 2, 3)


def test_squeeze_excite_scales_channels_within_unit_interval(rng, f64):
    se = SqueezeExcite(8)
    se.reset_parameters(1)
    x = rng.standard_normal((2, 8, 4, 4))
    ratio = se(Tensor(x)).data / x
    gate = ratio.reshape(2, 8, -1)
    np.testing.assert_allclose(gate, gate[..., :1].repeat(16, axis=2), rtol=1e-9)
    assert np.all((gate > 0) & (gate < 1))


@pytest.mark.parametrize("K", [3, 7])
@pytest.mark.parametrize("use_gconv", [True, False])
def test_block_preserves_shape(K, use_gconv, rng):
    block = GatedUniPoseBlock(8, K, use_gconv)
    assert block(Tensor(rng.standard_normal((2, 8, 9, 9)))).shape == (2, 8, 9, 9)
    with pytest.raises(ShapeError):
        block(Tensor(rng.standard_normal((2, 4, 9, 9))))
