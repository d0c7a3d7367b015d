"""Attention blocks and U-Net variants: shape contracts, the combination
identity, parameter-count anchors, and determinism."""

import numpy as np
import pytest

from erfseg.errors import ConfigError, ShapeError
from erfseg.layers import init_params
from erfseg.network import (
    FPABlock,
    FPAConfig,
    NetworkSpec,
    RFNABlock,
    RFNAConfig,
    UNet,
    build_unet,
    fpa_forward,
    network_forward,
    rfna_forward,
)
from erfseg.tensor import Tape, Tensor, tensor_sum


def rand_input(shape, seed=0, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).standard_normal(shape).astype(dtype))


class TestFPABlock:
    def test_output_shapes(self):
        blk = FPABlock(32, FPAConfig(), "fpa")
        params = init_params(blk, 0)
        y, f, a = blk.forward(params, rand_input((1, 32, 64, 64)))
        assert y.shape == (1, 64, 32, 32)
        assert f.shape == (1, 64, 32, 32)
        assert a.shape == (1, 64, 32, 32)

    def test_zeroed_projection_gives_half_attention(self):
        blk = FPABlock(4, FPAConfig(), "fpa")
        params = init_params(blk, 1)
        params["fpa.attn.proj.weight"].data[:] = 0
        params["fpa.attn.proj.bias"].data[:] = 0
        y, f, a = blk.forward(params, rand_input((2, 4, 16, 16), seed=1))
        assert np.all(a.data == 0.5)
        assert np.allclose(y.data, 1.5 * f.data)

    def test_combination_identity_bitwise(self):
        blk = FPABlock(8, FPAConfig(dilation=6, depthwise=True, expansion=2), "fpa")
        params = init_params(blk, 2)
        y, f, a = blk.forward(params, rand_input((1, 8, 32, 32), seed=2))
        assert np.array_equal(y.data, f.data * a.data + f.data)

    def test_attention_strictly_inside_unit_interval(self):
        blk = FPABlock(4, FPAConfig(), "fpa")
        params = init_params(blk, 3)
        x = rand_input((1, 4, 16, 16), seed=3)
        x.data *= 100  # push logits hard
        _, _, a = blk.forward(params, x)
        assert np.all(a.data > 0) and np.all(a.data < 1)

    def test_bounding_property_with_nonneg_features(self):
        blk = FPABlock(4, FPAConfig(), "fpa")
        params = init_params(blk, 4)
        y, f, a = blk.forward(params, rand_input((1, 4, 16, 16), seed=4))
        assert np.all(f.data >= 0)  # post-relu main branch
        assert np.all(y.data >= f.data - 1e-6)
        assert np.all(y.data <= 2 * f.data + 1e-6)

    def test_shared_dilated_weights_are_one_tensor(self):
        blk = FPABlock(4, FPAConfig(), "fpa")
        params = init_params(blk, 5, dtype=np.float64)
        x = Tensor(np.random.default_rng(5).standard_normal((1, 4, 8, 8)), dtype=np.float64)
        with Tape() as tape:
            y, _, _ = blk.forward(params, x)
            tape.backward(tensor_sum(y))
        g_total = params["fpa.attn.shared.weight"].grad.copy()
        # perturbing the shared tensor changes both applications: FD slope
        # must match the accumulated (two-use) gradient
        eps = 1e-6
        w = params["fpa.attn.shared.weight"]
        idx = (0, 0, 1, 1)
        for sign in (+1, -1):
            w.data[idx] += sign * eps
            val = tensor_sum(blk.forward(params, x)[0]).item()
            w.data[idx] -= sign * eps
            if sign > 0:
                f_plus = val
            else:
                f_minus = val
        fd = (f_plus - f_minus) / (2 * eps)
        assert abs(fd - g_total[idx]) < 1e-4 * max(1.0, abs(fd))

    def test_odd_extent_rejected(self):
        blk = FPABlock(2, FPAConfig(), "fpa")
        params = init_params(blk, 0)
        with pytest.raises(ShapeError):
            blk.forward(params, rand_input((1, 2, 7, 8)))


class TestRFNABlock:
    def test_internal_shapes_default_ratio(self):
        blk = RFNABlock(32, RFNAConfig(), "rfna")
        params = init_params(blk, 0)
        y, f, a = blk.forward(params, rand_input((1, 32, 64, 64)))
        assert y.shape == (1, 64, 32, 32) and a.shape == (1, 64, 32, 32)
        # attention bottleneck: stride-2 convs take 32 -> 4 at ratio 8,
        # with the expansion ratio 4 giving 256 channels
        assert blk.downs[0].out_channels == 256
        assert len(blk.downs) == 3

    @pytest.mark.parametrize("ratio,n_down", [(2, 1), (4, 2), (8, 3)])
    def test_ratio_prunes_stride_convs(self, ratio, n_down):
        blk = RFNABlock(8, RFNAConfig(ratio=ratio), "rfna")
        assert len(blk.downs) == n_down
        params = init_params(blk, 1)
        y, f, a = blk.forward(params, rand_input((1, 8, 32, 32), seed=1))
        assert y.shape == (1, 16, 16, 16)

    def test_zeroed_projection_gives_sigmoid_of_features(self):
        blk = RFNABlock(4, RFNAConfig(), "rfna")
        params = init_params(blk, 2)
        params["rfna.attn.proj.weight"].data[:] = 0
        params["rfna.attn.proj.bias"].data[:] = 0
        y, f, a = blk.forward(params, rand_input((1, 4, 16, 16), seed=2))
        expect_a = 1.0 / (1.0 + np.exp(-f.data))
        assert np.abs(a.data - expect_a).max() < 1e-6
        # F >= 0 post-relu, so A in [0.5, 1) and Y in [1.5F, 2F)
        assert np.all(a.data >= 0.5) and np.all(a.data < 1)
        assert np.all(y.data >= 1.5 * f.data - 1e-6)
        assert np.all(y.data <= 2.0 * f.data + 1e-6)

    def test_combination_identity_bitwise(self):
        blk = RFNABlock(8, RFNAConfig(ratio=4, depthwise=False, expansion=2), "rfna")
        params = init_params(blk, 3)
        y, f, a = blk.forward(params, rand_input((1, 8, 32, 32), seed=3))
        assert np.array_equal(y.data, f.data * a.data + f.data)

    def test_indivisible_extent_rejected(self):
        blk = RFNABlock(4, RFNAConfig(ratio=8), "rfna")
        params = init_params(blk, 4)
        with pytest.raises(ShapeError):
            blk.forward(params, rand_input((1, 4, 12, 12)))  # F=6 not divisible by 8

    def test_invalid_ratio_rejected(self):
        with pytest.raises(ConfigError):
            RFNAConfig(ratio=3)


# Table anchors: Param(M) column reports 3.13 / 12.51 / 3.13 / 3.13 / 4.2 / 5.63
ANCHORS_M = {"unet": 3.13e6, "fpa": 4.2e6, "rfna": 5.63e6}


def build_variant(variant, **spec_kw):
    spec = NetworkSpec(variant=variant, in_channels=4, **spec_kw)
    kw = {}
    if variant == "fpa":
        kw["fpa_cfg"] = FPAConfig()
    if variant == "rfna":
        kw["rfna_cfg"] = RFNAConfig()
    return build_unet(spec, **kw)


class TestVariantParameters:
    def test_wide_over_plain_ratio(self):
        unet = build_variant("unet")[1].count()
        wunet = build_variant("wunet")[1].count()
        assert 3.9 < wunet / unet < 4.0

    def test_dilation_adds_no_parameters(self):
        unet = build_variant("unet")[1].count()
        assert build_variant("d6unet")[1].count() == unet
        assert build_variant("d9unet")[1].count() == unet

    def test_variant_ordering(self):
        counts = {v: build_variant(v)[1].count() for v in ("unet", "fpa", "rfna")}
        assert counts["unet"] < counts["fpa"] < counts["rfna"]

    @pytest.mark.parametrize("variant", sorted(ANCHORS_M))
    def test_absolute_counts_near_anchors(self, variant):
        count = build_variant(variant)[1].count()
        anchor = ANCHORS_M[variant]
        assert abs(count - anchor) / anchor < 0.40

    def test_channel_doubling_quadruples_conv_weights(self):
        net32, p32 = build_variant("unet")
        net64, p64 = build_variant("unet", base_channels=64)
        w32 = sum(p.size for n, p in p32.items() if n.endswith("weight") and "head" not in n and "stem.conv0" not in n)
        w64 = sum(p.size for n, p in p64.items() if n.endswith("weight") and "head" not in n and "stem.conv0" not in n)
        assert w64 == 4 * w32


class TestNetworkForward:
    def test_brats_crop_shape(self):
        net, params = build_variant("fpa")
        out = network_forward(net, params, rand_input((1, 4, 160, 160)))
        assert out.shape == (1, 1, 160, 160)

    def test_constant_input_zeroed_head_gives_bias(self):
        net, params = build_variant("unet")
        params["head.conv0.weight"].data[:] = 0
        params["head.conv0.bias"].data[:] = 0.75
        out = network_forward(net, params, Tensor(np.full((1, 4, 32, 32), 3.0, dtype=np.float32)))
        assert np.allclose(out.data, 0.75)

    def test_captured_triples_satisfy_identity(self):
        for variant in ("fpa", "rfna"):
            net, params = build_variant(variant)
            logits, triples = net.forward(params, rand_input((1, 4, 64, 64), seed=7), capture=True)
            assert len(triples) == 3
            for f, a, y in triples:
                assert np.array_equal(y.data, f.data * a.data + f.data)
                assert np.all(a.data > 0) and np.all(a.data < 1)

    def test_divisibility_error_names_required_multiple(self):
        net, params = build_variant("unet")
        with pytest.raises(ShapeError, match="multiples of 8"):
            network_forward(net, params, rand_input((1, 4, 60, 60)))
        net, params = build_variant("rfna")
        with pytest.raises(ShapeError, match="multiples of 64"):
            network_forward(net, params, rand_input((1, 4, 160, 160)))

    def test_deterministic_logits(self):
        a_net, a_params = build_variant("fpa")
        b_net, b_params = build_variant("fpa")
        x = rand_input((1, 4, 64, 64), seed=9)
        la = a_net.forward(a_params, x)
        lb = b_net.forward(b_params, Tensor(x.data.copy()))
        assert np.array_equal(la.data, lb.data)

    def test_variant_config_consistency(self):
        with pytest.raises(ConfigError):
            UNet(NetworkSpec(variant="fpa"))
        with pytest.raises(ConfigError):
            UNet(NetworkSpec(variant="unet"), fpa_cfg=FPAConfig())


def test_standalone_block_helpers():
    cfg = FPAConfig()
    params = init_params(FPABlock(8, cfg, "fpa"), 0)
    y, f, a = fpa_forward(rand_input((1, 8, 16, 16)), cfg, params)
    assert y.shape == (1, 16, 8, 8)
    rcfg = RFNAConfig(ratio=4)
    params = init_params(RFNABlock(8, rcfg, "rfna"), 0)
    y, f, a = rfna_forward(rand_input((1, 8, 16, 16)), rcfg, params)
    assert y.shape == (1, 16, 8, 8)


def test_fpa_invalid_configs():
    with pytest.raises(ConfigError):
        FPAConfig(dilation=1)
    with pytest.raises(ConfigError):
        FPAConfig(expansion=0)
