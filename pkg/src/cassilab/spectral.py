"""Wavelength-conditioned synthesis: from latent feature to intensity planes.

A query wavelength is normalized to [-1, 1], lifted to a fixed random
sin/cos feature vector, refined by a small learned embedding, broadcast over
the spatial grid and decoded jointly with the latent feature into one
intensity plane per query.  The random frequencies are drawn once at model
creation and persist with every checkpoint, so a reloaded model renders
identically.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import WavelengthRangeError
from .mixer import FeatureMixer, MixerConfig

RANGE_ATOL = 1e-9


def normalize_wavelength(wavelength: float, lambda_min: float, lambda_max: float) -> float:
    """Map a wavelength in [lambda_min, lambda_max] to [-1, 1]."""
    if lambda_min >= lambda_max:
        raise ValueError(f"need lambda_min < lambda_max, got [{lambda_min}, {lambda_max}]")
    if wavelength < lambda_min - RANGE_ATOL or wavelength > lambda_max + RANGE_ATOL:
        raise WavelengthRangeError(
            f"wavelength {wavelength} nm outside the trained range "
            f"[{lambda_min}, {lambda_max}] nm; rendering there is undefined"
        )
    return 2.0 * (wavelength - lambda_min) / (lambda_max - lambda_min) - 1.0


class FrequencyBank:
    """Fixed random frequencies for the sin/cos wavelength encoding."""

    def __init__(self, values: np.ndarray, sigma: float):
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 1 or values.size < 1:
            raise ValueError("frequency bank must be a non-empty 1-D array")
        if sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {sigma}")
        self.values = values
        self.sigma = float(sigma)

    @property
    def m(self) -> int:
        return self.values.size

    @classmethod
    def draw(cls, m: int, sigma: float, generator: torch.Generator | None = None) -> "FrequencyBank":
        if m < 1:
            raise ValueError(f"mapping dimension must be >= 1, got {m}")
        b = torch.randn(m, generator=generator) * sigma
        return cls(b.numpy(), sigma)


def fourier_features(lam_hat: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
    """sin/cos features of normalized wavelengths: [Q] x [m] -> [Q, 2m]."""
    phase = 2.0 * math.pi * lam_hat.unsqueeze(-1) * bank.unsqueeze(0)
    return torch.cat([torch.sin(phase), torch.cos(phase)], dim=-1)


class SpectralEmbedding(nn.Module):
    """Two-layer MLP refining the fixed encoding into a task embedding."""

    def __init__(self, in_dim: int, embed_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, embed_dim)
        self.fc2 = nn.Linear(embed_dim, embed_dim)

    def forward(self, gamma: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(gamma)))


class SynthesisHead(nn.Module):
    """Decode (wavelength embedding, latent feature) into one intensity plane.

    Two 3x3 convolutions and a 1x1 projection; hidden width equals the
    concatenated input width.
    """

    def __init__(self, feature_channels: int, embed_dim: int):
        super().__init__()
        width = feature_channels + embed_dim
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.project = nn.Conv2d(width, 1, 1)
        self.embed_dim = embed_dim

    def forward(self, f: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        """f: [B, C, H, W]; e: [Q, D] -> planes [B, Q, H, W]."""
        B, C, H, W = f.shape
        Q, D = e.shape
        ff = f.unsqueeze(1).expand(B, Q, C, H, W).reshape(B * Q, C, H, W)
        ee = e.unsqueeze(0).expand(B, Q, D).reshape(B * Q, D, 1, 1).expand(B * Q, D, H, W)
        h = torch.cat([ee, ff], dim=1)
        h = F.gelu(self.conv1(h))
        h = F.gelu(self.conv2(h))
        return self.project(h).reshape(B, Q, H, W)


class SpectralFieldPrior(nn.Module):
    """Continuous-spectrum prior: mixer trunk plus wavelength-conditioned head.

    ``apply(x, eta, queries, sensed)`` computes the latent feature once and
    synthesizes one plane per query wavelength, in query order.  With the
    head disabled the band estimate is linearly interpolated across its
    sensed wavelengths instead (the interpolation ablation).
    """

    def __init__(self, n_bands: int, mixer_cfg: MixerConfig, bank: FrequencyBank | None,
                 embed_dim: int, lambda_min: float, lambda_max: float,
                 ssh_enabled: bool = True, rfe_enabled: bool = True, se_enabled: bool = True,
                 residual: bool = False):
        super().__init__()
        self.lambda_min = float(lambda_min)
        self.lambda_max = float(lambda_max)
        self.ssh_enabled = ssh_enabled
        self.rfe_enabled = rfe_enabled
        self.se_enabled = se_enabled
        self.residual = residual
        if not ssh_enabled:
            # interpolation ablation carries no learnable state at all
            self.mixer = None
            self.spectral_embedding = None
            self.head = None
            return
        self.mixer = FeatureMixer(n_bands, mixer_cfg)
        if rfe_enabled:
            if bank is None:
                raise ValueError("a frequency bank is required when the encoder is enabled")
            self.register_buffer("frequency_bank", torch.from_numpy(bank.values.copy()))
            self.bank_sigma = bank.sigma
            enc_dim = 2 * bank.m
        else:
            enc_dim = 1
        if se_enabled:
            self.spectral_embedding = SpectralEmbedding(enc_dim, embed_dim)
            head_embed = embed_dim
        else:
            self.spectral_embedding = None
            head_embed = enc_dim
        self.head = SynthesisHead(mixer_cfg.channels, head_embed)

    def encode_wavelengths(self, wavelengths, dtype=torch.float32, device=None) -> torch.Tensor:
        """Per-query embedding fed to the head: [Q, D] (or [Q, 2m] / [Q, 1])."""
        lam_hat = torch.tensor(
            [normalize_wavelength(l, self.lambda_min, self.lambda_max) for l in wavelengths],
            dtype=dtype, device=device,
        )
        if self.rfe_enabled:
            gamma = fourier_features(lam_hat, self.frequency_bank.to(dtype))
        else:
            gamma = lam_hat.unsqueeze(-1)
        if self.spectral_embedding is not None:
            return self.spectral_embedding(gamma)
        return gamma

    def apply(self, x: torch.Tensor, eta, queries, sensed=None) -> torch.Tensor:
        if len(queries) == 0:
            raise ValueError("query wavelength list must be non-empty")
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if not self.ssh_enabled:
            if sensed is None:
                raise ValueError("interpolation ablation needs the sensed wavelengths of x")
            out = interpolate_bands(x, sensed, queries)
        else:
            f = self.mixer(x, eta)
            e = self.encode_wavelengths(queries, dtype=x.dtype, device=x.device)
            out = self.head(f, e)
            if self.residual:
                if sensed is None:
                    raise ValueError("the residual variant needs the sensed wavelengths of x")
                out = out + interpolate_bands(x, sensed, queries)
        return out.squeeze(0) if squeeze else out


def interpolate_bands(x: torch.Tensor, sensed, queries) -> torch.Tensor:
    """Linear interpolation of a band-first tensor to new wavelengths.

    Queries outside the sensed span clamp to the nearest end band.
    """
    sensed = list(sensed)
    planes = []
    for lam in queries:
        if lam <= sensed[0]:
            planes.append(x[..., 0, :, :])
        elif lam >= sensed[-1]:
            planes.append(x[..., -1, :, :])
        else:
            hi = next(i for i, s in enumerate(sensed) if s >= lam)
            lo = hi - 1
            t = (lam - sensed[lo]) / (sensed[hi] - sensed[lo])
            planes.append((1 - t) * x[..., lo, :, :] + t * x[..., hi, :, :])
    return torch.stack(planes, dim=-3)
