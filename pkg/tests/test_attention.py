import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from crossdet.attention import (
    CamAttention,
    Cbam,
    ChannelAttention,
    SpatialAttention,
    minmax_normalize,
)

from oracles import assert_grads_close


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestChannelAttention:
    def test_zero_params_give_half(self):
        m = zero_(ChannelAttention(4))
        w = m(torch.randn(2, 4, 5, 5))
        assert torch.allclose(w, torch.full((2, 4), 0.5))

    def test_constant_input_duplicates_descriptor(self):
        # spatially constant channels make max pool equal average pool
        m = ChannelAttention(3)
        x = torch.arange(3.0)[None, :, None, None].expand(1, 3, 4, 4)
        max_pool = x.amax(dim=(2, 3))
        avg_pool = x.mean(dim=(2, 3))
        assert torch.equal(max_pool, avg_pool)
        # both pooled halves must influence identically: swapping the fc1
        # column blocks for max/avg leaves the output unchanged on this input
        w1 = m(x)
        with torch.no_grad():
            cols = m.fc1.weight.clone()
            m.fc1.weight.copy_(torch.cat([cols[:, 3:], cols[:, :3]], dim=1))
        assert torch.allclose(w1, m(x), atol=1e-6)

    def test_hand_oracle_single_hidden_unit(self):
        # C=2, one hidden unit, every parameter set by hand
        m = ChannelAttention(2, reduction=4)
        assert m.fc1.out_features == 1
        x = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]], [[0.0, 0.5], [1.0, -1.0]]]])
        with torch.no_grad():
            m.fc1.weight.copy_(torch.tensor([[0.1, -0.2, 0.3, 0.4]]))
            m.fc1.bias.copy_(torch.tensor([0.05]))
            m.fc2.weight.copy_(torch.tensor([[1.5], [-0.5]]))
            m.fc2.bias.copy_(torch.tensor([0.2, -0.1]))
        # descriptor = [max c0, max c1, avg c0, avg c1]
        d = [4.0, 1.0, 2.5, 0.125]
        hidden = max(0.0, 0.1 * d[0] - 0.2 * d[1] + 0.3 * d[2] + 0.4 * d[3] + 0.05)
        want = [sigmoid(1.5 * hidden + 0.2), sigmoid(-0.5 * hidden - 0.1)]
        got = m(x)[0]
        assert got[0].item() == pytest.approx(want[0], abs=1e-6)
        assert got[1].item() == pytest.approx(want[1], abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ChannelAttention(4)(torch.randn(1, 3, 5, 5))

    def test_weights_in_open_unit_interval(self):
        rng = torch.Generator().manual_seed(0)
        for _ in range(20):
            c = int(torch.randint(1, 6, (), generator=rng))
            m = ChannelAttention(c)
            w = m(torch.randn(2, c, 3, 3, generator=rng))
            assert (w > 0).all() and (w < 1).all()


class TestSpatialAttention:
    def test_zero_params_uniform_half(self):
        m = zero_(SpatialAttention(7))
        out = m(torch.randn(1, 4, 6, 6))
        assert torch.allclose(out, torch.full((1, 1, 6, 6), 0.5))

    def test_single_channel_pooled_maps_equal_input(self):
        x = torch.randn(1, 1, 5, 5)
        assert torch.equal(x.mean(dim=1, keepdim=True), x)
        assert torch.equal(x.amax(dim=1, keepdim=True), x)

    def test_hand_oracle_1x1_kernels(self):
        m = SpatialAttention(1)
        x = torch.tensor([[[[0.0, 1.0, 2.0], [3.0, 4.0, 5.0], [6.0, 7.0, 8.0]]]])
        with torch.no_grad():
            m.conv_avg.weight.fill_(2.0)
            m.conv_avg.bias.fill_(0.25)
            m.conv_max.weight.fill_(-1.0)
            m.conv_max.bias.fill_(0.5)
        out = m(x)[0, 0]
        for i in range(3):
            for j in range(3):
                v = x[0, 0, i, j].item()
                want = sigmoid((2.0 * v + 0.25) + (-1.0 * v + 0.5))
                assert out[i, j].item() == pytest.approx(want, abs=1e-6)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            SpatialAttention(4)

    def test_separate_convs_equal_stacked_concat_conv(self):
        # adding two separately-convolved pooled maps is the same linear map
        # as convolving their concatenation with the stacked 2-channel kernel
        torch.manual_seed(0)
        m = SpatialAttention(3).double()
        x = torch.randn(2, 5, 8, 8, dtype=torch.float64)
        avg_map = x.mean(dim=1, keepdim=True)
        max_map = x.amax(dim=1, keepdim=True)
        stacked_kernel = torch.cat([m.conv_avg.weight, m.conv_max.weight], dim=1)
        stacked_bias = m.conv_avg.bias + m.conv_max.bias
        combined = F.conv2d(
            torch.cat([avg_map, max_map], dim=1), stacked_kernel, stacked_bias, padding=1
        )
        assert torch.allclose(m(x), torch.sigmoid(combined), atol=1e-12)


class TestCbam:
    def test_zero_params_quarter_scaling(self):
        m = zero_(Cbam(4))
        x = torch.randn(2, 4, 6, 6)
        assert torch.allclose(m(x), 0.25 * x, atol=1e-6)

    def test_zero_input_zero_output(self):
        m = Cbam(3)
        x = torch.zeros(1, 3, 4, 4)
        assert torch.equal(m(x), torch.zeros_like(x))

    def test_matches_two_stage_composition(self):
        torch.manual_seed(1)
        m = Cbam(4).double()
        x = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        w = m.channel(x)
        stage1 = x * w[:, :, None, None]
        want = stage1 * m.spatial(stage1)
        assert torch.allclose(m(x), want, atol=1e-12)

    def test_shape_preserved(self):
        m = Cbam(2)
        x = torch.randn(3, 2, 5, 7)
        assert m(x).shape == x.shape


class TestCamAttention:
    def test_zero_weights_degenerate(self):
        m = zero_(CamAttention(4))
        x = torch.randn(2, 4, 5, 5)
        logit, attended, heat = m(x)
        assert torch.equal(logit, torch.zeros(2))
        assert torch.allclose(heat, torch.full((2, 5, 5), 0.5))
        assert torch.allclose(attended, 0.5 * x)

    def test_single_channel_identity_projection(self):
        m = CamAttention(1)
        with torch.no_grad():
            m.fc.weight.fill_(1.0)
        x = torch.randn(1, 1, 4, 4)
        raw = torch.einsum("c,nchw->nhw", m.fc.weight.squeeze(0), x)
        assert torch.equal(raw, x[:, 0])

    def test_weighted_sum_oracle(self):
        torch.manual_seed(2)
        m = CamAttention(3).double()
        x = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        w = m.fc.weight.squeeze(0).detach().numpy()
        xn = x.numpy()
        raw_want = np.einsum("c,nchw->nhw", w, xn)
        logit, attended, heat = m(x)
        lo = raw_want.reshape(2, -1).min(axis=1)[:, None, None]
        hi = raw_want.reshape(2, -1).max(axis=1)[:, None, None]
        heat_want = (raw_want - lo) / (hi - lo)
        assert np.allclose(heat.detach().numpy(), heat_want, atol=1e-12)
        assert np.allclose(
            logit.detach().numpy(), xn.mean(axis=(2, 3)) @ w, atol=1e-12
        )
        assert np.allclose(
            attended.detach().numpy(), xn * heat_want[:, None], atol=1e-12
        )

    def test_shape_preserved_and_range(self):
        m = CamAttention(4)
        x = torch.randn(3, 4, 6, 7)
        logit, attended, heat = m(x)
        assert attended.shape == x.shape
        assert heat.shape == (3, 6, 7)
        assert (heat >= 0).all() and (heat <= 1).all()

    def test_minmax_constant_map(self):
        assert torch.allclose(
            minmax_normalize(torch.full((1, 3, 3), 2.0)), torch.full((1, 3, 3), 0.5)
        )


class TestGradients:
    """Every parameter gradient of a sum-of-outputs loss against central
    finite differences, float64, on random tiny configurations."""

    def _check(self, make_module, n_configs=25):
        gen = torch.Generator().manual_seed(42)
        for _ in range(n_configs):
            c = int(torch.randint(1, 5, (), generator=gen))
            h = int(torch.randint(2, 6, (), generator=gen))
            w = int(torch.randint(2, 6, (), generator=gen))
            m = make_module(c).double()
            x = torch.randn(1, c, h, w, dtype=torch.float64, generator=gen)
            params = list(m.parameters())

            def loss():
                out = m(x)
                if isinstance(out, tuple):
                    return sum(o.sum() for o in out)
                return out.sum()

            assert_grads_close(loss, params)

    def test_channel_attention(self):
        self._check(lambda c: ChannelAttention(c, reduction=2))

    def test_spatial_attention(self):
        self._check(lambda c: SpatialAttention(3))

    def test_cbam(self):
        self._check(lambda c: Cbam(c, reduction=2, kernel_size=3))

    def test_cam(self):
        self._check(lambda c: CamAttention(c))
