import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sacseg import ops
from sacseg.gradcheck import finite_diff_check
from sacseg.sac import (SAC_IS, SAC_ISK, SAC_S, SAC_SK, VARIANTS, SacLayer, SacVariant,
                        adaptive_weight, as_sac_layer, attention_map, baseline_attention,
                        baseline_forward, make_baseline, sac_forward, sac_naive)
from sacseg.tensor import ShapeError, Tensor


def _layer(variant, c=3, o=3, seed=0, **kw):
    kw.setdefault("residual", c == o)
    return SacLayer(variant, c, o, np.random.default_rng(seed), **kw)


def _inputs(rng, c=3, h=5, w=6, n=1):
    return Tensor(rng.normal(size=(n, c, h, w))), Tensor(rng.normal(size=(n, 3, h, w)))


@pytest.mark.parametrize("name,channels", [("S", 1), ("IS", 4), ("SK", 9), ("ISK", 36)])
def test_attention_channel_counts(name, channels):
    assert _layer(VARIANTS[name], c=4, o=4).attention_channels == channels


def test_variant_names_round_trip():
    for name in ("S", "IS", "SK", "ISK", "OISK"):
        assert SacVariant.from_name(f"SAC-{name}").suffix == name
    with pytest.raises(ValueError):
        SacVariant.from_name("SAC-X")


def test_zero_attention_weights_give_one_half(rng):
    layer = _layer(SAC_ISK)
    layer.attention.weight.data[:] = 0
    _, coords = _inputs(rng)
    assert np.all(attention_map(coords, layer).data == 0.5)


def test_attention_strictly_inside_unit_interval(rng):
    layer = _layer(SAC_IS)
    a = attention_map(Tensor(rng.normal(scale=50, size=(1, 3, 6, 6))), layer).data
    assert np.all((a > 0) & (a < 1))


def test_sk_attention_tiled_over_channels():
    a = np.arange(9.0).reshape(1, 9, 1, 1)
    tiled = ops.tile_channels(Tensor(a), 3).data.ravel()
    assert tiled.tolist() == list(range(9)) * 3


@pytest.mark.parametrize("variant", list(VARIANTS.values()), ids=lambda v: v.name)
def test_unit_attention_reduces_to_static_conv(variant, rng):
    layer = _layer(variant, residual=False)
    x, _ = _inputs(rng)
    ones = np.ones((1, layer.attention_channels, 5, 6))
    np.testing.assert_allclose(sac_forward(x, None, layer, ones).data, layer.main(x).data,
                               rtol=0, atol=1e-12)


@pytest.mark.parametrize("variant", list(VARIANTS.values()), ids=lambda v: v.name)
def test_zero_attention_leaves_residual(variant, rng):
    layer = _layer(variant, bias=False)
    x, _ = _inputs(rng)
    zeros = np.zeros((1, layer.attention_channels, 5, 6))
    np.testing.assert_array_equal(sac_forward(x, None, layer, zeros).data, x.data)


@pytest.mark.parametrize("variant", list(VARIANTS.values()), ids=lambda v: v.name)
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), h=st.integers(1, 5), w=st.integers(1, 5),
       c=st.integers(1, 3))
def test_scheduled_matches_naive(variant, seed, h, w, c):
    rng = np.random.default_rng(seed)
    layer = SacLayer(variant, c, c, rng, follow=True)
    x, coords = Tensor(rng.normal(size=(2, c, h, w))), Tensor(rng.normal(size=(2, 3, h, w)))
    fast = sac_forward(x, coords, layer).data
    slow = sac_naive(x, coords, layer).data
    assert np.max(np.abs(fast - slow)) <= 1e-9 * max(1.0, np.max(np.abs(slow)))


def test_single_pixel_closed_form(rng):
    layer = _layer(SAC_ISK, c=2, o=2, residual=False)
    x, coords = _inputs(rng, c=2, h=1, w=1)
    a = attention_map(coords, layer).data.reshape(2, 3, 3)
    w = layer.main.weight.data
    # only the centre tap sees a non-padded input
    expected = w[:, :, 1, 1] @ (a[:, 1, 1] * x.data[0, :, 0, 0]) + layer.main.bias.data
    np.testing.assert_allclose(sac_forward(x, coords, layer).data.ravel(), expected, atol=1e-14)


def test_output_anchor_differs_for_spatial_only_map(rng):
    layer = _layer(SAC_S, residual=False)
    x, _ = _inputs(rng)
    a = rng.uniform(size=(1, 1, 5, 6))
    src = sac_naive(x, None, layer, a, anchor="source").data
    out = sac_naive(x, None, layer, a, anchor="output").data
    np.testing.assert_allclose(src, sac_forward(x, None, layer, a).data, atol=1e-12)
    assert np.max(np.abs(src - out)) > 1e-3


def test_anchor_irrelevant_for_constant_map(rng):
    layer = _layer(SAC_S, residual=False)
    a = np.full((1, 1, 4, 4), 0.3)
    np.testing.assert_allclose(adaptive_weight(layer, a, "source")[..., 1:-1, 1:-1, :, :],
                               adaptive_weight(layer, a, "output")[..., 1:-1, 1:-1, :, :])


def test_output_adaptive_variant_only_in_oracle(rng):
    oisk = SacVariant.from_name("OISK")
    layer = _layer(oisk, c=2, o=2)
    x, coords = _inputs(rng, c=2, h=3, w=3)
    assert layer.attention_channels == 2 * 2 * 9
    with pytest.raises(ValueError):
        sac_forward(x, coords, layer)
    assert sac_naive(x, coords, layer).shape == (1, 2, 3, 3)


def test_wrong_attention_shape_rejected(rng):
    layer = _layer(SAC_IS)
    x, _ = _inputs(rng)
    with pytest.raises(ShapeError):
        sac_forward(x, None, layer, np.ones((1, 1, 5, 6)))
    with pytest.raises(ShapeError):
        sac_forward(x, None, layer, np.ones((1, 3, 4, 6)))


def test_residual_needs_matching_channels():
    with pytest.raises(ValueError):
        SacLayer(SAC_S, 2, 3, np.random.default_rng(0), residual=True)


def test_extra_cost_is_attention_conv():
    costs = {}
    for name, v in VARIANTS.items():
        layer = _layer(v, c=8, o=8, follow=True)
        p, m, _, pe, me = layer.cost((16, 16))
        assert pe == layer.attention.num_parameters()
        assert me == pe * 16 * 16 - layer.attention_channels * 16 * 16
        costs[name] = (pe, me)
    assert costs["S"] < costs["SK"] < costs["ISK"]
    assert costs["S"] < costs["IS"] < costs["ISK"]


@pytest.mark.parametrize("variant", list(VARIANTS.values()), ids=lambda v: v.name)
def test_gradients_reach_attention_and_kernel(variant, rng):
    layer = _layer(variant, c=2, o=2, follow=True)
    x, coords = _inputs(rng, c=2, h=4, w=4)
    f = lambda t: ops.sum(ops.square(sac_forward(t, coords, layer)))  # noqa: E731
    assert finite_diff_check(f, x) <= 1e-5
    ops.sum(sac_forward(x, coords, layer)).backward()
    assert np.abs(layer.attention.weight.grad).sum() > 0
    assert np.abs(layer.main.weight.grad).sum() > 0


def test_se_attention_uniform_over_space(rng):
    params = make_baseline("SE", 3, 3, rng)
    x, _ = _inputs(rng, h=6, w=6)
    a = baseline_attention(x, "SE", params).data
    assert a.shape == (1, 3, 1, 1)
    se = as_sac_layer(params, SacVariant(adapt_I=True, adapt_S=False), rng)
    np.testing.assert_allclose(sac_naive(x, None, se, a).data,
                               baseline_forward(x, "SE", params).data, atol=1e-12)


def test_cam_attention_varies_over_space(rng):
    params = make_baseline("CAM", 8, 3, rng)
    x, _ = _inputs(rng, c=8, h=8, w=8)
    a = baseline_attention(x, "CAM", params).data
    assert a.shape == (1, 8, 8, 8) and np.ptp(a, axis=(2, 3)).max() > 1e-3
    layer = as_sac_layer(params, SAC_IS, rng)
    np.testing.assert_allclose(sac_forward(x, None, layer, a).data,
                               baseline_forward(x, "CAM", params).data, atol=1e-12)


def test_pac_constant_guidance_is_plain_conv(rng):
    params = make_baseline("PAC", 3, 2, rng)
    x, _ = _inputs(rng)
    guide = np.full((1, 3, 5, 6), 0.7)
    a = baseline_attention(x, "PAC", params, guide).data
    interior = a[..., 1:-1, 1:-1]
    np.testing.assert_allclose(interior, 1.0)
    np.testing.assert_allclose(baseline_forward(x, "PAC", params, guide).data[..., 1:-1, 1:-1],
                               params.conv(x).data[..., 1:-1, 1:-1], atol=1e-12)


def test_cbam_shapes(rng):
    params = make_baseline("CBAM", 4, 4, rng)
    x, _ = _inputs(rng, c=4)
    ch, sp = baseline_attention(x, "CBAM", params)
    assert ch.shape == (1, 4, 1, 1) and sp.shape == (1, 1, 5, 6)
    assert baseline_forward(x, "CBAM", params).shape == (1, 4, 5, 6)
