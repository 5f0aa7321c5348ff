import pytest
import torch

from cassilab.errors import ConfigError
from cassilab.mixer import (
    CrossDomainBlock,
    Downsample,
    FeatureMixer,
    FrequencySequenceBlock,
    GatedChannelFeedForward,
    LocalGateBlock,
    MixerConfig,
    NoiseAwareEmbed,
    SpatialSequenceBlock,
    frequency_sequence_to_spatial,
    selective_scan,
    spatial_to_frequency_sequence,
)

from conftest import fd_gradcheck, randomize_parameters, weighted_sum_loss


def naive_scan(u, delta, A, B_in, C_in):
    Bt, L, d = u.shape
    h = torch.zeros(Bt, d, A.shape[1], dtype=u.dtype)
    ys = []
    for t in range(L):
        dA = torch.exp(delta[:, t].unsqueeze(-1) * A)
        h = dA * h + delta[:, t].unsqueeze(-1) * B_in[:, t].unsqueeze(1) * u[:, t].unsqueeze(-1)
        ys.append((h * C_in[:, t].unsqueeze(1)).sum(-1))
    return torch.stack(ys, dim=1)


class TestSelectiveScan:
    def test_matches_naive_recurrence(self):
        gen = torch.Generator().manual_seed(0)
        for chunk in (4, 16, 64, 200):
            u = torch.randn(2, 101, 3, generator=gen, dtype=torch.float64)
            delta = torch.rand(2, 101, 3, generator=gen, dtype=torch.float64)
            A = -torch.rand(3, 5, generator=gen, dtype=torch.float64) - 0.05
            B_in = torch.randn(2, 101, 5, generator=gen, dtype=torch.float64)
            C_in = torch.randn(2, 101, 5, generator=gen, dtype=torch.float64)
            got = selective_scan(u, delta, A, B_in, C_in, chunk=chunk)
            want = naive_scan(u, delta, A, B_in, C_in)
            assert (got - want).abs().max().item() <= 1e-12

    def test_constant_input_matches_geometric_sum(self):
        # input-independent parameters admit a closed form:
        # h_t = (I - dA^t) (I - dA)^-1 dB u,  y_t = C . h_t
        L, d, S = 40, 2, 3
        delta_val, u_val = 0.17, 0.8
        A = -torch.tensor([[0.5, 1.0, 2.0], [0.25, 0.75, 1.5]], dtype=torch.float64)
        B_val = torch.tensor([0.3, -0.6, 1.1], dtype=torch.float64)
        C_val = torch.tensor([0.9, 0.2, -0.4], dtype=torch.float64)
        u = torch.full((1, L, d), u_val, dtype=torch.float64)
        delta = torch.full((1, L, d), delta_val, dtype=torch.float64)
        B_in = B_val.expand(1, L, S).contiguous()
        C_in = C_val.expand(1, L, S).contiguous()
        got = selective_scan(u, delta, A, B_in, C_in, chunk=16)

        dA = torch.exp(delta_val * A)  # [d, S]
        dBu = delta_val * B_val.unsqueeze(0) * u_val  # [d=1 broadcast, S]
        for t in (0, 1, 7, L - 1):
            h_t = (1 - dA ** (t + 1)) / (1 - dA) * dBu
            y_t = (h_t * C_val.unsqueeze(0)).sum(-1)
            assert torch.allclose(got[0, t], y_t, atol=1e-12)

    def test_gradients_flow(self):
        u = torch.randn(1, 9, 2, dtype=torch.float64, requires_grad=True)
        delta = torch.rand(1, 9, 2, dtype=torch.float64) + 0.01
        A = -torch.ones(2, 3, dtype=torch.float64)
        B_in = torch.randn(1, 9, 3, dtype=torch.float64)
        C_in = torch.randn(1, 9, 3, dtype=torch.float64)
        selective_scan(u, delta, A, B_in, C_in, chunk=4).sum().backward()
        assert torch.isfinite(u.grad).all()


class TestLocalGateBlock:
    def test_zero_init_is_identity(self):
        block = LocalGateBlock(6)
        f = torch.randn(1, 6, 16, 16)
        assert torch.equal(block(f), f)

    def test_shape_preserved(self):
        block = LocalGateBlock(6)
        randomize_parameters(block, seed=1)
        f = torch.randn(1, 6, 16, 16)
        assert block(f).shape == f.shape

    def test_gradcheck(self):
        block = LocalGateBlock(4).double()
        randomize_parameters(block, seed=2)
        f = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        assert fd_gradcheck(lambda: weighted_sum_loss(block(f)), block) <= 1e-3


class TestFrequencySequenceBlock:
    def test_zero_init_is_identity(self):
        block = FrequencySequenceBlock(3, d_state=4)
        f = torch.randn(1, 3, 8, 8)
        assert torch.allclose(block(f), f, atol=1e-6)

    def test_transform_roundtrip(self):
        f = torch.randn(2, 5, 12, 16)
        seq, grid = spatial_to_frequency_sequence(f)
        assert seq.shape == (2, 12 * (16 // 2 + 1), 10)
        back = frequency_sequence_to_spatial(seq, grid)
        assert (back - f).abs().max().item() <= 1e-5

    def test_roundtrip_odd_width(self):
        f = torch.randn(1, 2, 8, 9)
        seq, grid = spatial_to_frequency_sequence(f)
        back = frequency_sequence_to_spatial(seq, grid)
        assert (back - f).abs().max().item() <= 1e-5

    def test_gradcheck(self):
        block = FrequencySequenceBlock(2, d_state=3).double()
        randomize_parameters(block, seed=3)
        f = torch.randn(1, 2, 8, 8, dtype=torch.float64)
        assert fd_gradcheck(lambda: weighted_sum_loss(block(f)), block) <= 1e-3


class TestGatedChannelFeedForward:
    def test_zero_init_is_identity(self):
        block = GatedChannelFeedForward(6)
        f = torch.randn(1, 6, 16, 16)
        assert torch.equal(block(f), f)

    def test_shape_preserved(self):
        block = GatedChannelFeedForward(6)
        randomize_parameters(block, seed=4)
        f = torch.randn(2, 6, 16, 16)
        assert block(f).shape == f.shape

    def test_gradcheck(self):
        block = GatedChannelFeedForward(4).double()
        randomize_parameters(block, seed=5)
        f = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        assert fd_gradcheck(lambda: weighted_sum_loss(block(f)), block) <= 1e-3


class TestCrossDomainBlock:
    def test_all_zero_init_is_identity(self):
        block = CrossDomainBlock(4, d_state=4)
        f = torch.randn(1, 4, 8, 8)
        assert torch.allclose(block(f), f, atol=1e-6)

    def test_seq_domain_none_is_channel_of_spatial(self):
        block = CrossDomainBlock(4, seq_domain="none")
        randomize_parameters(block, seed=6)
        f = torch.randn(1, 4, 8, 8)
        expected = block.channel(block.spatial(f))
        assert torch.equal(block(f), expected)
        assert block.sequence is None

    def test_finite_on_random_input(self):
        block = CrossDomainBlock(6, d_state=4)
        randomize_parameters(block, seed=7)
        out = block(torch.randn(1, 6, 16, 16))
        assert torch.isfinite(out).all()

    def test_spatial_sequence_variant(self):
        block = CrossDomainBlock(4, d_state=4, seq_domain="spatial")
        assert isinstance(block.sequence, SpatialSequenceBlock)
        f = torch.randn(1, 4, 8, 8)
        assert torch.allclose(block(f), f, atol=1e-6)  # zero-init residuals


class TestDownsample:
    def test_shape_16_to_8(self):
        down = Downsample(6)
        assert down(torch.randn(1, 6, 16, 16)).shape == (1, 12, 8, 8)

    def test_shape_8_to_4(self):
        down = Downsample(12)
        assert down(torch.randn(1, 12, 8, 8)).shape == (1, 24, 4, 4)

    def test_odd_dims_rejected(self):
        with pytest.raises(ConfigError, match="even"):
            Downsample(4)(torch.randn(1, 4, 7, 8))

    def test_gradcheck(self):
        down = Downsample(3).double()
        randomize_parameters(down, seed=8)
        f = torch.randn(1, 3, 8, 8, dtype=torch.float64)
        assert fd_gradcheck(lambda: weighted_sum_loss(down(f)), down) <= 1e-3


class TestEmbed:
    def test_channel_count_matches_branch_width(self):
        embed = NoiseAwareEmbed(6, 6)  # 72-channel config: 72 / 12 = 6
        out = embed(torch.randn(1, 6, 16, 16), 0.1)
        assert out.shape == (1, 6, 16, 16)

    def test_zero_weights_zero_output(self):
        embed = NoiseAwareEmbed(3, 2)
        with torch.no_grad():
            embed.conv.weight.zero_()
            embed.conv.bias.zero_()
        out = embed(torch.zeros(1, 3, 8, 8), 0.5)
        assert torch.all(out == 0)

    def test_eta_reaches_output(self):
        embed = NoiseAwareEmbed(3, 2)
        x = torch.randn(1, 3, 8, 8)
        assert not torch.equal(embed(x, 0.0), embed(x, 1.0))

    def test_gradcheck(self):
        embed = NoiseAwareEmbed(2, 2).double()
        randomize_parameters(embed, seed=9)
        x = torch.randn(1, 2, 8, 8, dtype=torch.float64)
        eta = torch.tensor(0.2, dtype=torch.float64)
        assert fd_gradcheck(lambda: weighted_sum_loss(embed(x, eta)), embed) <= 1e-3


class TestMixerConfig:
    def test_channel_multiple_of_twelve(self):
        with pytest.raises(ConfigError, match="12"):
            MixerConfig(channels=16)

    def test_bad_branches(self):
        with pytest.raises(ConfigError, match="branches"):
            MixerConfig(channels=12, branches=4)

    def test_bad_seq_domain(self):
        with pytest.raises(ConfigError, match="seq_domain"):
            MixerConfig(channels=12, seq_domain="wavelet")


class TestFeatureMixer:
    def test_desk_scale_shape(self):
        mixer = FeatureMixer(3, MixerConfig(channels=12, d_state=4))
        f = mixer(torch.randn(1, 3, 8, 8), 0.1)
        assert f.shape == (1, 12, 8, 8)

    def test_paper_scale_shape(self):
        # six bands, 72 channels, 256x256 patches
        mixer = FeatureMixer(6, MixerConfig(channels=72, d_state=4))
        with torch.no_grad():
            f = mixer(torch.randn(1, 6, 256, 256), 0.1)
        assert f.shape == (1, 72, 256, 256)

    def test_indivisible_dims_rejected(self):
        mixer = FeatureMixer(3, MixerConfig(channels=12, d_state=4))
        with pytest.raises(ConfigError, match="divisible by 4"):
            mixer(torch.randn(1, 3, 10, 8), 0.1)

    def test_zero_init_is_affine(self):
        mixer = FeatureMixer(2, MixerConfig(channels=12, d_state=4))
        gen = torch.Generator().manual_seed(10)
        x1 = torch.randn(1, 2, 8, 8, generator=gen)
        x2 = torch.randn(1, 2, 8, 8, generator=gen)
        zero = torch.zeros(1, 2, 8, 8)
        lhs = mixer(x1 + x2, 0.3) + mixer(zero, 0.3)
        rhs = mixer(x1, 0.3) + mixer(x2, 0.3)
        assert (lhs - rhs).abs().max().item() <= 1e-5

    @pytest.mark.parametrize("branches,width", [(1, 12), (2, 6), (3, 4)])
    def test_branch_truncation_keeps_channels(self, branches, width):
        mixer = FeatureMixer(2, MixerConfig(channels=12, d_state=4, branches=branches))
        f = mixer(torch.randn(1, 2, 8, 8), 0.0)
        assert f.shape == (1, 12, 8, 8)
        assert mixer.refine_fine.out_channels == width

    def test_single_branch_has_no_other_paths(self):
        mixer = FeatureMixer(2, MixerConfig(channels=12, d_state=4, branches=1))
        names = [n for n, _ in mixer.named_parameters()]
        assert not any("meso" in n or "coarse" in n for n in names)

    def test_parameter_count_accounting(self):
        def count(**kw):
            cfg = MixerConfig(channels=12, d_state=4, **kw)
            return sum(p.numel() for p in FeatureMixer(2, cfg).parameters())

        assert count(branches=1) < count(branches=2) < count(branches=3)
        assert count(seq_domain="none") < count(seq_domain="spatial")
        assert count(seq_domain="spatial") < count(seq_domain="frequency")

    def test_gradcheck(self):
        mixer = FeatureMixer(2, MixerConfig(channels=12, d_state=4)).double()
        randomize_parameters(mixer, seed=11)
        x = torch.randn(1, 2, 8, 8, dtype=torch.float64)
        eta = torch.tensor(0.1, dtype=torch.float64)
        assert fd_gradcheck(
            lambda: weighted_sum_loss(mixer(x, eta)), mixer, dense_limit=32
        ) <= 1e-3
