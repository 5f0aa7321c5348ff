"""Cross-domain feature trunk of the continuous-spectrum prior.

A band estimate plus a noise-level channel is embedded and refined along a
three-branch pyramid (full, half, quarter resolution).  Each branch applies
one cross-domain block: a gated local convolution (spatial), a selective
state-space layer over flattened 2D FFT coefficients (frequency), and a
gated channel feed-forward (channel), each in residual form.  Branch
outputs are upsampled, remapped by 1x1 convolutions and concatenated into
a wavelength-agnostic latent feature with ``channels`` channels.

All residual-branch output weights are zero-initialized, so a freshly
constructed mixer is a fixed linear embedding of its input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError

SEQ_DOMAINS = ("none", "spatial", "frequency")


@dataclass(frozen=True)
class MixerConfig:
    channels: int
    d_state: int = 8
    branches: int = 3
    seq_domain: str = "frequency"

    def __post_init__(self):
        if self.channels <= 0 or self.channels % 12 != 0:
            raise ConfigError(f"mixer channels must be a positive multiple of 12, got {self.channels}")
        if self.d_state < 1:
            raise ConfigError(f"state dim must be >= 1, got {self.d_state}")
        if self.branches not in (1, 2, 3):
            raise ConfigError(f"branches must be 1, 2 or 3, got {self.branches}")
        if self.seq_domain not in SEQ_DOMAINS:
            raise ConfigError(f"seq_domain must be one of {SEQ_DOMAINS}, got {self.seq_domain!r}")


def selective_scan(u: torch.Tensor, delta: torch.Tensor, A: torch.Tensor,
                   B_in: torch.Tensor, C_in: torch.Tensor, chunk: int = 64) -> torch.Tensor:
    """Linear state-space recurrence with input-dependent parameters.

    h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t,   y_t = C_t . h_t

    Shapes: u, delta [B, L, d]; A [d, S] (negative entries); B_in, C_in
    [B, L, S].  Evaluated chunk-parallel: within a chunk the pairwise decay
    factors exp(G_t - G_s) are formed from cumulative sums of delta*A, which
    stay <= 0 for s <= t so the exponentials never overflow; the carried
    state enters the same masked product as a virtual step s = 0.
    """
    Bt, L, d = u.shape
    S = A.shape[1]
    inject = delta.unsqueeze(-1) * B_in.unsqueeze(-2) * u.unsqueeze(-1)  # [B, L, d, S]
    log_decay = delta.unsqueeze(-1) * A  # [B, L, d, S]
    h_carry = u.new_zeros(Bt, 1, d, S)
    outs = []
    for start in range(0, L, chunk):
        ld = log_decay[:, start : start + chunk]
        w = inject[:, start : start + chunk]
        Lc = ld.shape[1]
        G = torch.cumsum(ld, dim=1)
        # column s = 0 carries the incoming state with full decay exp(G_t)
        G_cols = torch.cat([torch.zeros_like(G[:, :1]), G], dim=1)
        diff = G.unsqueeze(2) - G_cols.unsqueeze(1)  # [B, t, s, d, S]
        T = torch.exp(diff.masked_fill(_future_mask(Lc, u.device), float("-inf")))
        h = torch.einsum("btsdn,bsdn->btdn", T, torch.cat([h_carry, w], dim=1))
        outs.append((h * C_in[:, start : start + chunk].unsqueeze(-2)).sum(-1))
        h_carry = h[:, -1:]
    return torch.cat(outs, dim=1)


def _future_mask(Lc: int, device) -> torch.Tensor:
    key = (Lc, device)
    mask = _MASK_CACHE.get(key)
    if mask is None:
        # rows index t over 1..Lc, columns s over 0..Lc; mask where s > t
        mask = torch.triu(torch.ones(Lc, Lc + 1, dtype=torch.bool, device=device), diagonal=2)
        mask = mask[None, :, :, None, None]
        _MASK_CACHE[key] = mask
    return mask


_MASK_CACHE: dict = {}


class SelectiveSequenceLayer(nn.Module):
    """Input-conditioned state-space scan over a [B, L, d] sequence.

    The step size is kept positive through a softplus, the diagonal state
    matrix negative through an exponential.  The output projection is
    zero-initialized so enclosing residual blocks start as identities.
    """

    def __init__(self, d_model: int, d_state: int = 8):
        super().__init__()
        self.d_model = d_model
        self.d_state = d_state
        self.delta_proj = nn.Linear(d_model, d_model)
        self.b_proj = nn.Linear(d_model, d_state, bias=False)
        self.c_proj = nn.Linear(d_model, d_state, bias=False)
        a0 = torch.arange(1, d_state + 1, dtype=torch.float32).repeat(d_model, 1)
        self.a_log = nn.Parameter(torch.log(a0))
        self.out_proj = nn.Linear(d_model, d_model)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)
        # step sizes start log-uniform in [1e-3, 1e-1]
        dt = torch.exp(torch.rand(d_model) * (math.log(0.1) - math.log(1e-3)) + math.log(1e-3))
        with torch.no_grad():
            self.delta_proj.bias.copy_(torch.log(torch.expm1(dt)))
            self.delta_proj.weight.uniform_(-0.1, 0.1)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        delta = F.softplus(self.delta_proj(u))
        A = -torch.exp(self.a_log).to(u.dtype)
        y = selective_scan(u, delta, A, self.b_proj(u), self.c_proj(u))
        return self.out_proj(y)


class LocalGateBlock(nn.Module):
    """Residual local refinement gated by a global channel statistic."""

    def __init__(self, channels: int):
        super().__init__()
        self.local = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.gate = nn.Sequential(
            nn.Conv2d(channels, channels, 1),
            nn.GELU(),
            nn.Conv2d(channels, channels, 1),
        )
        nn.init.zeros_(self.local.weight)
        nn.init.zeros_(self.local.bias)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        g = torch.sigmoid(self.gate(F.adaptive_avg_pool2d(f, 1)))
        return f + self.local(f) * g


class FrequencySequenceBlock(nn.Module):
    """Residual selective-scan over flattened 2D FFT coefficients.

    Real and imaginary parts are stacked along channels, scanned row-major
    over the half-spectrum grid, recombined, and inverse-transformed.
    """

    def __init__(self, channels: int, d_state: int = 8):
        super().__init__()
        self.channels = channels
        self.sequence = SelectiveSequenceLayer(2 * channels, d_state)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        B, C, H, W = f.shape
        seq, grid = spatial_to_frequency_sequence(f)
        seq = self.sequence(seq)
        return f + frequency_sequence_to_spatial(seq, grid)


def spatial_to_frequency_sequence(f: torch.Tensor):
    """[B, C, H, W] -> ([B, H*(W//2+1), 2C] sequence, (H, W) spatial grid)."""
    B, C, H, W = f.shape
    z = torch.fft.rfft2(f, norm="ortho")
    stacked = torch.cat([z.real, z.imag], dim=1)  # [B, 2C, H, Wf]
    seq = stacked.reshape(B, 2 * C, -1).transpose(1, 2)
    return seq, (H, W)


def frequency_sequence_to_spatial(seq: torch.Tensor, grid) -> torch.Tensor:
    """Inverse of :func:`spatial_to_frequency_sequence`."""
    H, W = grid
    Wf = W // 2 + 1
    B, L, C2 = seq.shape
    C = C2 // 2
    stacked = seq.transpose(1, 2).reshape(B, C2, H, Wf)
    z = torch.complex(stacked[:, :C], stacked[:, C:])
    return torch.fft.irfft2(z, s=(H, W), norm="ortho")


class SpatialSequenceBlock(nn.Module):
    """Ablation variant: the same scan over raw pixel order, no transform."""

    def __init__(self, channels: int, d_state: int = 8):
        super().__init__()
        self.sequence = SelectiveSequenceLayer(channels, d_state)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        B, C, H, W = f.shape
        seq = f.reshape(B, C, H * W).transpose(1, 2)
        seq = self.sequence(seq)
        return f + seq.transpose(1, 2).reshape(B, C, H, W)


class GatedChannelFeedForward(nn.Module):
    """Residual gated-depthwise feed-forward across channels."""

    def __init__(self, channels: int, expansion: int = 2):
        super().__init__()
        hidden = expansion * channels
        self.expand = nn.Conv2d(channels, 2 * hidden, 1)
        self.dw_a = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.dw_b = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.project = nn.Conv2d(hidden, channels, 1)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        a, b = self.expand(f).chunk(2, dim=1)
        return f + self.project(F.gelu(self.dw_a(a)) * self.dw_b(b))


class CrossDomainBlock(nn.Module):
    """Serial spatial -> sequence -> channel refinement, shape preserving."""

    def __init__(self, channels: int, d_state: int = 8, seq_domain: str = "frequency"):
        super().__init__()
        self.spatial = LocalGateBlock(channels)
        if seq_domain == "frequency":
            self.sequence = FrequencySequenceBlock(channels, d_state)
        elif seq_domain == "spatial":
            self.sequence = SpatialSequenceBlock(channels, d_state)
        elif seq_domain == "none":
            self.sequence = None
        else:
            raise ConfigError(f"seq_domain must be one of {SEQ_DOMAINS}, got {seq_domain!r}")
        self.channel = GatedChannelFeedForward(channels)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        f = self.spatial(f)
        if self.sequence is not None:
            f = self.sequence(f)
        return self.channel(f)


class NoiseAwareEmbed(nn.Module):
    """3x3 embedding of the band estimate with the noise level as an extra channel."""

    def __init__(self, n_bands: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(n_bands + 1, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, eta) -> torch.Tensor:
        B, N, H, W = x.shape
        eta_map = torch.as_tensor(eta, dtype=x.dtype, device=x.device).reshape(1, 1, 1, 1)
        eta_map = eta_map.expand(B, 1, H, W)
        return self.conv(torch.cat([x, eta_map], dim=1))


class Downsample(nn.Module):
    """4x4 stride-2 convolution halving the grid and doubling the channels."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 2 * channels, 4, stride=2, padding=1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        H, W = f.shape[-2:]
        if H % 2 or W % 2:
            raise ConfigError(f"downsample needs even spatial dims, got {H}x{W}")
        return self.conv(f)


class FeatureMixer(nn.Module):
    """Multi-scale trunk producing the wavelength-agnostic latent feature."""

    def __init__(self, n_bands: int, cfg: MixerConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.channels
        c_fine = C // 12
        self.embed = NoiseAwareEmbed(n_bands, c_fine)
        self.block_fine = CrossDomainBlock(c_fine, cfg.d_state, cfg.seq_domain)
        widths = {1: C, 2: C // 2, 3: C // 3}[cfg.branches]
        self.refine_fine = nn.Conv2d(c_fine, widths, 1)
        if cfg.branches >= 2:
            self.down_fine = Downsample(c_fine)
            self.block_meso = CrossDomainBlock(2 * c_fine, cfg.d_state, cfg.seq_domain)
            self.refine_meso = nn.Conv2d(2 * c_fine, widths, 1)
        if cfg.branches >= 3:
            self.down_meso = Downsample(2 * c_fine)
            self.block_coarse = CrossDomainBlock(4 * c_fine, cfg.d_state, cfg.seq_domain)
            self.refine_coarse = nn.Conv2d(4 * c_fine, widths, 1)

    def forward(self, x: torch.Tensor, eta) -> torch.Tensor:
        H, W = x.shape[-2:]
        if H % 4 or W % 4:
            raise ConfigError(
                f"mixer needs spatial dims divisible by 4, got {H}x{W}; "
                f"pad to {math.ceil(H / 4) * 4}x{math.ceil(W / 4) * 4}"
            )
        f_fine = self.block_fine(self.embed(x, eta))
        parts = [self.refine_fine(f_fine)]
        if self.cfg.branches >= 2:
            f_meso = self.block_meso(self.down_fine(f_fine))
            up2 = F.interpolate(f_meso, scale_factor=2, mode="bilinear", align_corners=False)
            parts.append(self.refine_meso(up2))
        if self.cfg.branches >= 3:
            f_coarse = self.block_coarse(self.down_meso(f_meso))
            up4 = F.interpolate(f_coarse, scale_factor=4, mode="bilinear", align_corners=False)
            parts.append(self.refine_coarse(up4))
        return torch.cat(parts, dim=1)
