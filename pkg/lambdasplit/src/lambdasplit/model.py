"""Hierarchical variational unmixing model: a ladder VAE whose decoder emits
fluorophore concentration maps, closed by a fixed differentiable spectral
mixing layer so the reconstruction can be compared against the measured
spectral input (self-supervised training).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class ModelConfig:
    hierarchy_levels: int = 3
    feature_channels: int = 32
    latent_channels: int = 8
    patch_size: int = 64
    batch_size: int = 8
    lr: float = 1e-3
    epochs: int = 60
    early_stop_patience: int = 30
    lr_plateau_patience: int = 15
    mmse_samples: int = 50
    tile_overlap_fraction: float = 0.25
    rng_seed: int = 0

    def __post_init__(self):
        if self.hierarchy_levels < 1:
            raise ValueError("hierarchy_levels must be >= 1")
        if self.mmse_samples < 1:
            raise ValueError("mmse_samples must be >= 1")
        if not 0.0 < self.tile_overlap_fraction < 0.5:
            raise ValueError("tile_overlap_fraction must lie in (0, 0.5)")
        if self.patch_size % 2**self.hierarchy_levels:
            raise ValueError("patch_size must be divisible by 2**hierarchy_levels")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


class SpectralMixerLayer(nn.Module):
    """Fixed linear map from concentrations (B, F, H, W) to spectral bands
    (B, L, H, W); weights are the l1-column-normalized mixing matrix and are
    never trained. The backward pass applies the transpose matrix."""

    def __init__(self, mixing: np.ndarray, dtype=torch.float32):
        super().__init__()
        m = torch.as_tensor(np.asarray(mixing), dtype=dtype)
        if m.ndim != 2:
            raise ValueError("mixing matrix must be 2-D (bands x fluorophores)")
        self.register_buffer("m", m)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        if u.shape[1] != self.m.shape[1]:
            raise ValueError(
                f"mixer expects {self.m.shape[1]} channels, got {u.shape[1]}"
            )
        return torch.einsum("lf,bfhw->blhw", self.m, u)


def gaussian_kl(mu_q, sigma_q, mu_p, sigma_p) -> torch.Tensor:
    """Analytic KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)), elementwise."""
    return (
        torch.log(sigma_p / sigma_q)
        + (sigma_q**2 + (mu_q - mu_p) ** 2) / (2.0 * sigma_p**2)
        - 0.5
    )


def spectral_mse(s_input: torch.Tensor, s_recon: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all bands and voxels (and the batch)."""
    return torch.mean((s_input - s_recon) ** 2)


def elbo_loss(s_input, s_recon, posteriors, priors) -> torch.Tensor:
    """Reconstruction mean-squared error plus the sum over hierarchy levels of
    the analytic Gaussian KL (each level averaged per latent element)."""
    loss = spectral_mse(s_input, s_recon)
    for (mu_q, sig_q), (mu_p, sig_p) in zip(posteriors, priors):
        loss = loss + gaussian_kl(mu_q, sig_q, mu_p, sig_p).mean()
    return loss


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = F.relu(self.conv1(F.relu(x)))
        return x + self.conv2(h)


def _split_stats(raw: torch.Tensor):
    mu, raw_sigma = raw.chunk(2, dim=1)
    return mu, F.softplus(raw_sigma) + 1e-4


class LadderVAE(nn.Module):
    """Bottom-up encoder over K downsampling levels; top-down decoder with a
    diagonal-Gaussian latent per level (standard-normal prior at the top,
    learned conditional priors below). Linear output head emits F channels.
    """

    def __init__(self, n_bands: int, n_fluors: int, cfg: ModelConfig, mixing: np.ndarray):
        super().__init__()
        self.cfg = cfg
        self.n_bands = n_bands
        self.n_fluors = n_fluors
        c, z, k = cfg.feature_channels, cfg.latent_channels, cfg.hierarchy_levels

        self.stem = nn.Conv2d(n_bands, c, 3, padding=1)
        self.enc_res = nn.ModuleList(ResBlock(c) for _ in range(k))
        self.enc_down = nn.ModuleList(nn.Conv2d(c, c, 3, stride=2, padding=1) for _ in range(k))

        self.q_top = nn.Conv2d(c, 2 * z, 1)
        self.dec_start = nn.Conv2d(z, c, 1)
        self.dec_up = nn.ModuleList(nn.Conv2d(c, c, 3, padding=1) for _ in range(k - 1))
        self.prior_heads = nn.ModuleList(nn.Conv2d(c, 2 * z, 1) for _ in range(k - 1))
        self.post_heads = nn.ModuleList(nn.Conv2d(2 * c, 2 * z, 1) for _ in range(k - 1))
        self.merge = nn.ModuleList(nn.Conv2d(c + z, c, 1) for _ in range(k - 1))
        self.dec_res = nn.ModuleList(ResBlock(c) for _ in range(k - 1))
        self.final_up = nn.Conv2d(c, c, 3, padding=1)
        self.head = nn.Sequential(ResBlock(c), nn.Conv2d(c, n_fluors, 3, padding=1))

        self.mixer = SpectralMixerLayer(mixing)

    def forward(self, x: torch.Tensor, sample: bool = True):
        """Returns (u_hat, s_hat, posteriors, priors)."""
        k = self.cfg.hierarchy_levels
        h = self.stem(x)
        skips = []
        for level in range(k):
            h = self.enc_res[level](h)
            h = self.enc_down[level](h)
            skips.append(h)

        posteriors = []
        priors = []
        mu_q, sig_q = _split_stats(self.q_top(skips[-1]))
        mu_p = torch.zeros_like(mu_q)
        sig_p = torch.ones_like(sig_q)
        z = mu_q + sig_q * torch.randn_like(sig_q) if sample else mu_q
        posteriors.append((mu_q, sig_q))
        priors.append((mu_p, sig_p))

        h = self.dec_start(z)
        for idx in range(k - 1):
            level = k - 2 - idx  # next finer encoder level
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.dec_up[idx](h)
            mu_p, sig_p = _split_stats(self.prior_heads[idx](h))
            mu_q, sig_q = _split_stats(self.post_heads[idx](torch.cat([h, skips[level]], dim=1)))
            z = mu_q + sig_q * torch.randn_like(sig_q) if sample else mu_q
            posteriors.append((mu_q, sig_q))
            priors.append((mu_p, sig_p))
            h = self.merge[idx](torch.cat([h, z], dim=1))
            h = self.dec_res[idx](h)

        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.final_up(h)
        u_hat = self.head(h)
        s_hat = self.mixer(u_hat)
        return u_hat, s_hat, posteriors, priors

    def loss(self, x: torch.Tensor) -> torch.Tensor:
        _, s_hat, posteriors, priors = self.forward(x, sample=True)
        return elbo_loss(x, s_hat, posteriors, priors)
