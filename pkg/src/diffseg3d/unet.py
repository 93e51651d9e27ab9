"""Three-level ladder 3D U-Net shared by the denoiser and the segmenter.

Decoder outputs are exposed as stages ordered coarse to fine:
stage 1 = 4c channels at 1/4 resolution, stage 2 = 2c at 1/2, stage 3 = c at full.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import autodiff as ad


@dataclass(frozen=True)
class UNet3DConfig:
    base_channels: int = 16
    channel_mults: tuple[int, int, int] = (1, 2, 4)
    time_embedding: bool = True
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if len(self.channel_mults) != 3:
            raise ValueError("channel_mults: exactly three resolution levels are supported")
        if any(b != 2 * a for a, b in zip(self.channel_mults, self.channel_mults[1:])):
            raise ValueError(f"channel_mults: must double per level, got {self.channel_mults}")
        if self.base_channels < 1:
            raise ValueError("base_channels: must be >= 1")

    @property
    def stage_channels(self) -> dict[int, int]:
        c = self.base_channels
        m1, m2, m3 = self.channel_mults
        return {1: c * m3, 2: c * m2, 3: c * m1}

    @property
    def temb_dim(self) -> int:
        return 4 * self.base_channels


class Conv3d(nn.Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1):
        super().__init__()
        fan_in = cin * k**3
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k, k).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(cout).uniform_(-bound, bound))
        self.stride = stride
        self.padding = k // 2

    def forward(self, x):
        return ad.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.groups = ad.num_groups(channels)
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return ad.group_norm(x, self.groups, self.weight, self.bias)


class Linear(nn.Module):
    def __init__(self, fin: int, fout: int):
        super().__init__()
        bound = 1.0 / math.sqrt(fin)
        self.weight = nn.Parameter(torch.empty(fout, fin).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(fout).uniform_(-bound, bound))

    def forward(self, x):
        return x @ self.weight.T + self.bias


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int | None):
        super().__init__()
        self.norm1 = GroupNorm(cin)
        self.conv1 = Conv3d(cin, cout)
        self.temb = Linear(temb_dim, cout) if temb_dim else None
        self.norm2 = GroupNorm(cout)
        self.conv2 = Conv3d(cout, cout)
        self.skip = Conv3d(cin, cout, k=1) if cin != cout else None

    def forward(self, x, temb=None):
        h = self.conv1(ad.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(ad.silu(temb))[:, :, None, None, None]
        h = self.conv2(ad.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape [N, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class UNet3D(nn.Module):
    def __init__(self, config: UNet3DConfig):
        super().__init__()
        self.config = config
        c1, c2, c3 = (config.base_channels * m for m in config.channel_mults)
        td = config.temb_dim if config.time_embedding else None
        if td:
            self.temb1 = Linear(config.base_channels, td)
            self.temb2 = Linear(td, td)
        self.inc = Conv3d(config.in_channels, c1)
        self.enc1 = ResBlock(c1, c1, td)
        self.down1 = Conv3d(c1, c1, stride=2)
        self.enc2 = ResBlock(c1, c2, td)
        self.down2 = Conv3d(c2, c2, stride=2)
        self.enc3 = ResBlock(c2, c3, td)
        self.mid = ResBlock(c3, c3, td)
        self.dec1 = ResBlock(c3 + c3, c3, td)
        self.dec2 = ResBlock(c3 + c2, c2, td)
        self.dec3 = ResBlock(c2 + c1, c1, td)
        self.out_norm = GroupNorm(c1)
        self.out = Conv3d(c1, config.out_channels, k=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor | None = None, return_stages: bool = False):
        if x.dim() != 5 or x.shape[1] != self.config.in_channels:
            raise ad.ShapeError(f"expected input [N,{self.config.in_channels},D,H,W], got {tuple(x.shape)}")
        if any(s % 4 for s in x.shape[2:]):
            raise ad.ShapeError(f"spatial extents must be divisible by 4, got {tuple(x.shape[2:])}")
        temb = None
        if self.config.time_embedding:
            if t is None:
                raise ValueError("timestep required for a time-conditioned network")
            t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
            temb = timestep_embedding(t, self.config.base_channels).to(x.dtype)
            temb = self.temb2(ad.silu(self.temb1(temb)))
        h1 = self.enc1(self.inc(x), temb)
        h2 = self.enc2(self.down1(h1), temb)
        h3 = self.enc3(self.down2(h2), temb)
        m = self.mid(h3, temb)
        s1 = self.dec1(ad.concat_channels([m, h3]), temb)
        s2 = self.dec2(ad.concat_channels([ad.trilinear_upsample(s1, h2.shape[2:]), h2]), temb)
        s3 = self.dec3(ad.concat_channels([ad.trilinear_upsample(s2, h1.shape[2:]), h1]), temb)
        y = self.out(ad.silu(self.out_norm(s3)))
        if return_stages:
            return y, {1: s1, 2: s2, 3: s3}
        return y


def build_unet(config: UNet3DConfig, seed: int) -> UNet3D:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet3D(config)
