import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from cassi_tools import nn_core as nn
from cassi_tools.cassi_model import ShearedCube
from cassi_tools.config import CMFormerConfig, SolverConfig
from cassi_tools.denoisers import (
    CAB,
    CMB,
    FFN,
    CMFormer,
    SoftThreshold,
    TVDenoiser,
    soft_threshold,
    tv_denoise,
    tv_objective,
)
from cassi_tools.errors import DimensionError, DomainError
from cassi_tools.unfolding import build_network, count_parameters

F64 = np.float64


def f64(data):
    return nn.Tensor(np.asarray(data, dtype=F64))


def sheared(data, d=0):
    return ShearedCube(np.asarray(data, dtype=F64), d)


class TestSoftThreshold:
    def test_zero_threshold_is_identity(self, rng):
        v = sheared(rng.standard_normal((3, 4, 2)))
        assert_array_equal(soft_threshold(v, 0.0).data, v.data)

    def test_values(self):
        out = soft_threshold(sheared([[[0.5, -0.1, -0.7]]]), 0.2)
        assert_allclose(out.data, [[[0.3, 0.0, -0.5]]])

    def test_negative_threshold(self):
        with pytest.raises(DomainError):
            soft_threshold(sheared(np.zeros((1, 1, 1))), -0.1)

    @pytest.mark.parametrize("v, tau, lam", [(0.5, 1.0, 0.4), (-1.3, 2.0, 1.0), (0.05, 1.0, 0.3)])
    def test_minimizes_scalar_objective(self, v, tau, lam):
        grid = np.linspace(-3.0, 3.0, 600_001)
        best = grid[np.argmin(tau * (grid - v) ** 2 + lam * np.abs(grid))]
        theta = lam / (2.0 * tau)
        assert abs(soft_threshold(sheared([[[v]]]), theta).data.item() - best) < 1e-5

    def test_module_maps_beta_to_threshold(self):
        # beta = tau / lam = 2.5 gives theta = 0.2
        out = SoftThreshold().apply(sheared([[[0.5, -0.1]]]), 2.5)
        assert_allclose(out.data, [[[0.3, 0.0]]])

    def test_infinite_beta_is_identity(self, rng):
        v = sheared(rng.standard_normal((2, 2, 2)))
        assert_array_equal(SoftThreshold().apply(v, np.inf).data, v.data)

    def test_no_parameters(self):
        assert SoftThreshold().parameters() == []
        assert TVDenoiser().parameters() == []


class TestTV:
    def test_zero_weight_is_identity(self, rng):
        v = sheared(rng.random((6, 6, 2)))
        assert tv_denoise(v, 0.0, 10) is v

    def test_constant_input_unchanged(self):
        v = sheared(np.full((6, 7, 2), 0.4))
        assert_allclose(tv_denoise(v, 0.3, 20).data, v.data, atol=1e-12)

    def test_objective_not_worse_than_input(self, rng):
        f = rng.random((12, 12, 3))
        weight = 0.1
        u = tv_denoise(sheared(f), weight, 50).data
        assert tv_objective(u, f, weight) <= tv_objective(f, f, weight)

    def test_invalid_arguments(self):
        v = sheared(np.zeros((2, 2, 1)))
        with pytest.raises(DomainError):
            tv_denoise(v, -1.0, 5)
        with pytest.raises(DomainError):
            tv_denoise(v, 0.1, 0)

    def test_module_preserves_extents(self, rng):
        v = f64(rng.random((2, 5, 7, 3)))
        out = TVDenoiser(5)(v, f64(np.full((2, 1, 1, 1), 2.0)))
        assert out.shape == v.shape
        assert out.dtype == v.dtype


def identity_1x1(conv, channels):
    conv.weight.assign(np.eye(channels).reshape(1, 1, channels, channels))
    conv.bias.assign(np.zeros(channels))


class TestBlocks:
    def test_cmb_zero_output_weights(self, rng):
        cmb = CMB(3, 3, rng=rng, dtype=F64)
        cmb.w3.weight.assign(np.zeros_like(cmb.w3.weight.data))
        assert not cmb(f64(rng.standard_normal((1, 4, 4, 3)))).data.any()

    def test_cmb_identity_weights_square_input(self, rng):
        cmb = CMB(3, 5, rng=rng, dtype=F64)
        for conv in (cmb.w1, cmb.w2, cmb.w3):
            identity_1x1(conv, 3)
        delta = np.zeros((5, 5, 3))
        delta[2, 2, :] = 1.0
        cmb.dw.weight.assign(delta)
        cmb.dw.bias.assign(np.zeros(3))
        x = f64(rng.standard_normal((1, 6, 6, 3)))
        assert_allclose(cmb(x).data, x.data * x.data, atol=1e-12)

    def test_cmb_receptive_field(self, rng):
        k = 5
        cmb = CMB(2, k, rng=rng, dtype=F64)
        identity_1x1(cmb.w3, 2)
        x = rng.standard_normal((1, 12, 12, 2))
        r, c = 6, 6
        local = np.zeros_like(x)
        local[:, r - k // 2:r + k // 2 + 1, c - k // 2:c + k // 2 + 1] = \
            x[:, r - k // 2:r + k // 2 + 1, c - k // 2:c + k // 2 + 1]
        assert_allclose(cmb(f64(x)).data[0, r, c], cmb(f64(local)).data[0, r, c], atol=1e-12)

    def test_ffn_zero_projection(self, rng):
        ffn = FFN(3, 2, rng=rng, dtype=F64)
        ffn.project.weight.assign(np.zeros_like(ffn.project.weight.data))
        ffn.project.bias.assign(np.zeros(3))
        assert not ffn(f64(rng.standard_normal((1, 4, 4, 3)))).data.any()

    def test_ffn_no_dw_equals_full_with_delta_kernel(self, rng):
        full = FFN(3, 2, "full", rng=np.random.default_rng(1), dtype=F64)
        no_dw = FFN(3, 2, "no-dw", rng=np.random.default_rng(2), dtype=F64)
        no_dw.expand.weight.assign(full.expand.weight.data)
        no_dw.expand.bias.assign(full.expand.bias.data)
        no_dw.project.weight.assign(full.project.weight.data)
        no_dw.project.bias.assign(full.project.bias.data)
        delta = np.zeros((3, 3, 6))
        delta[1, 1, :] = 1.0
        full.mix.weight.assign(delta)
        full.mix.bias.assign(np.zeros(6))
        x = f64(rng.standard_normal((1, 5, 5, 3)))
        assert_allclose(full(x).data, no_dw(x).data, atol=1e-12)

    @pytest.mark.parametrize("variant, mix", [("full", "DepthwiseConv2d"), ("pw-only", "Conv2d"), ("no-dw", None)])
    def test_ffn_variants(self, rng, variant, mix):
        ffn = FFN(4, 2, variant, rng=rng, dtype=F64)
        assert (type(ffn.mix).__name__ if ffn.mix is not None else None) == mix

    def test_cab_zero_branches_is_identity(self, rng):
        cab = CAB(3, CMFormerConfig(channels=3, kernel_size=3, ffn_expansion=2), 0.0, rng=rng, dtype=F64)
        for conv in (cab.cmb.w3, cab.ffn.project):
            conv.weight.assign(np.zeros_like(conv.weight.data))
            conv.bias.assign(np.zeros_like(conv.bias.data))
        x = f64(rng.standard_normal((2, 4, 6, 3)))
        out = cab(x)
        assert out.shape == x.shape
        assert_array_equal(out.data, x.data)

    def test_cab_without_ffn(self, rng):
        cab = CAB(3, CMFormerConfig(channels=3, kernel_size=3, ffn_variant="none"), 0.0, rng=rng)
        assert cab.ffn is None and cab.norm2 is None

    @pytest.mark.parametrize("block", ["cmb", "ffn", "cab"])
    def test_block_gradcheck(self, rng, block):
        x = f64(rng.standard_normal((1, 6, 6, 4)))
        if block == "cmb":
            m = CMB(4, 3, rng=rng, dtype=F64)
            inputs = [x, m.w1.weight, m.dw.weight, m.w2.bias, m.w3.weight]
        elif block == "ffn":
            m = FFN(4, 2, rng=rng, dtype=F64)
            inputs = [x, m.expand.weight, m.mix.weight, m.project.bias]
        else:
            m = CAB(4, CMFormerConfig(channels=4, kernel_size=3, ffn_expansion=2), 0.0, rng=rng, dtype=F64)
            inputs = [x, m.norm1.gain, m.cmb.dw.weight, m.norm2.offset, m.ffn.expand.weight]
        assert nn.gradcheck(lambda: m(x), inputs, name=block, rng=rng).passed(1e-4)


class TestCMFormer:
    def test_zero_head_returns_input(self, rng, tiny_model_config):
        net = CMFormer(4, tiny_model_config, rng=rng, dtype=F64)
        net.head.weight.assign(np.zeros_like(net.head.weight.data))
        z = f64(rng.random((1, 8, 12, 4)))
        assert_array_equal(net(z, f64(np.ones((1, 1, 1, 1)))).data, z.data)

    def test_preserves_extents(self, rng, tiny_model_config):
        net = CMFormer(4, tiny_model_config, rng=rng)
        z = nn.Tensor(rng.random((1, 32, 44, 4)).astype(np.float32))
        out = net(z, nn.Tensor(np.full((1, 1, 1, 1), 0.5, dtype=np.float32)))
        assert out.shape == z.shape

    def test_indivisible_extent_names_padding(self, rng, tiny_model_config):
        net = CMFormer(2, tiny_model_config, rng=rng)
        with pytest.raises(DimensionError, match="pad by 3") as err:
            net(nn.Tensor(np.zeros((1, 8, 9, 2))), nn.Tensor(np.ones((1, 1, 1, 1))))
        assert err.value.axis == "width"

    def test_band_mismatch(self, rng, tiny_model_config):
        net = CMFormer(2, tiny_model_config, rng=rng)
        with pytest.raises(DimensionError):
            net(nn.Tensor(np.zeros((1, 8, 8, 3))), nn.Tensor(np.ones((1, 1, 1, 1))))

    def test_beta_changes_output(self, rng, tiny_model_config):
        net = CMFormer(2, tiny_model_config, rng=rng, dtype=F64)
        z = f64(rng.random((1, 8, 8, 2)))
        a = net(z, f64(np.full((1, 1, 1, 1), 0.1))).data
        b = net(z, f64(np.full((1, 1, 1, 1), 10.0))).data
        assert not np.allclose(a, b)

    def test_parameter_list_is_stable(self, rng, tiny_model_config):
        net = CMFormer(2, tiny_model_config, rng=rng)
        first = [(name, p.shape) for name, p in net.named_parameters()]
        assert first == [(name, p.shape) for name, p in net.named_parameters()]
        assert first[0][0] == "embed.weight"

    def test_full_scale_parameter_count(self):
        net = build_network(SolverConfig(framework="r2admm", stages=1), CMFormerConfig(), 28,
                            np.random.default_rng(0))
        counts = count_parameters(net)
        assert 620_000 <= counts["total"] <= 940_000
        assert counts["total"] == sum(v for k, v in counts.items() if k != "total")

    def test_kernel_size_monotone(self):
        totals = [CMFormer(28, CMFormerConfig(kernel_size=k), rng=np.random.default_rng(0)).num_parameters()
                  for k in (3, 5, 7, 11, 13)]
        assert totals == sorted(totals)
        assert len(set(totals)) == len(totals)

    def test_no_cmb_variant(self, rng):
        config = CMFormerConfig(channels=4, blocks=(1, 1, 1), kernel_size=3, use_cmb=False)
        net = CMFormer(2, config, rng=rng)
        assert all(block.cmb is None for block in net.enc1 + net.bottleneck)

    def test_no_cab_skeleton(self, rng):
        config = CMFormerConfig(channels=4, blocks=(1, 1, 3), kernel_size=3)
        full = CMFormer(2, config, rng=np.random.default_rng(0))
        skeleton = CMFormer(2, dataclasses.replace(config, use_cab=False), rng=rng, dtype=F64)
        levels = ("enc1", "enc2", "bottleneck", "dec2", "dec1")
        assert all(getattr(skeleton, level) == [] for level in levels)
        cab_params = sum(block.num_parameters() for level in levels for block in getattr(full, level))
        assert cab_params > 0
        assert skeleton.num_parameters() == full.num_parameters() - cab_params
        roots = {name.split(".")[0] for name, _ in skeleton.named_parameters()}
        assert roots == {"embed", "down1", "down2", "up2", "fuse2", "up1", "fuse1", "head"}

        z = f64(rng.random((1, 8, 12, 2)))
        out = skeleton(z, f64(np.ones((1, 1, 1, 1))))
        assert out.shape == z.shape
        assert np.all(np.isfinite(out.data))
