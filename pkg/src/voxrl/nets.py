"""Small convolutional networks sized for desk-scale 3D volumes."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

_GN_GROUPS = 4


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(_GN_GROUPS, ch), ch)


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Transformer-style embedding of (possibly fractional) timesteps, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock3d(nn.Module):
    def __init__(self, ch: int, emb_dim: int | None = None):
        super().__init__()
        self.norm1 = _gn(ch)
        self.conv1 = nn.Conv3d(ch, ch, 3, padding=1)
        self.norm2 = _gn(ch)
        self.conv2 = nn.Conv3d(ch, ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.emb_proj = nn.Linear(emb_dim, ch) if emb_dim else None
        self.act = nn.SiLU()

    def forward(self, x, emb=None):
        h = self.conv1(self.act(self.norm1(x)))
        if self.emb_proj is not None and emb is not None:
            h = h + self.emb_proj(self.act(emb))[:, :, None, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return x + h


class VolumeEncoder(nn.Module):
    """Volume (B,1,S,S,S) -> continuous latent (B,C,S/f,S/f,S/f), f in {2,4}."""

    def __init__(self, latent_channels: int, hidden: int = 32, factor: int = 4):
        super().__init__()
        if factor not in (2, 4):
            raise ValueError("downsampling factor must be 2 or 4")
        layers: list[nn.Module] = [nn.Conv3d(1, hidden, 4, stride=2, padding=1), nn.SiLU()]
        ch = hidden
        if factor == 4:
            layers += [nn.Conv3d(hidden, hidden * 2, 4, stride=2, padding=1), nn.SiLU()]
            ch = hidden * 2
        self.down = nn.Sequential(*layers)
        self.res = ResBlock3d(ch)
        self.out = nn.Conv3d(ch, latent_channels, 3, padding=1)

    def forward(self, x):
        return self.out(self.res(self.down(x)))


class VolumeDecoder(nn.Module):
    """Latent -> volume in [0,1] via a final sigmoid."""

    def __init__(self, latent_channels: int, hidden: int = 32, factor: int = 4):
        super().__init__()
        ch = hidden * 2 if factor == 4 else hidden
        self.inp = nn.Conv3d(latent_channels, ch, 3, padding=1)
        self.res = ResBlock3d(ch)
        ups: list[nn.Module] = []
        if factor == 4:
            ups += [nn.ConvTranspose3d(ch, hidden, 4, stride=2, padding=1), nn.SiLU()]
            ch = hidden
        ups += [nn.ConvTranspose3d(ch, hidden, 4, stride=2, padding=1), nn.SiLU()]
        self.up = nn.Sequential(*ups)
        self.out = nn.Conv3d(hidden, 1, 3, padding=1)

    def forward(self, z):
        h = self.up(self.res(self.inp(z)))
        return torch.sigmoid(self.out(h))


class LatentDenoiser(nn.Module):
    """Noise predictor on latent grids, conditioned on timestep and class."""

    def __init__(self, channels: int, hidden: int = 48, n_classes: int = 2, emb_dim: int = 64):
        super().__init__()
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(),
                                      nn.Linear(emb_dim, emb_dim))
        self.class_emb = nn.Embedding(n_classes, emb_dim)
        self.conv_in = nn.Conv3d(channels, hidden, 3, padding=1)
        self.block1 = ResBlock3d(hidden, emb_dim)
        self.block2 = ResBlock3d(hidden, emb_dim)
        self.norm_out = _gn(hidden)
        self.conv_out = nn.Conv3d(hidden, channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        self.act = nn.SiLU()

    def forward(self, x, t, class_ids):
        emb = self.time_mlp(sinusoidal_embedding(t, self.emb_dim))
        emb = emb + self.class_emb(class_ids)
        h = self.conv_in(x)
        h = self.block1(h, emb)
        h = self.block2(h, emb)
        return self.conv_out(self.act(self.norm_out(h)))


class ConvEncoder3d(nn.Module):
    """4-block strided 3D encoder with a scalar/logit head."""

    def __init__(self, out_dim: int = 1, widths: tuple[int, ...] = (16, 32, 64, 64)):
        super().__init__()
        layers: list[nn.Module] = []
        cin = 1
        for w in widths:
            layers += [nn.Conv3d(cin, w, 4, stride=2, padding=1), _gn(w), nn.SiLU()]
            cin = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(cin, out_dim)

    def forward(self, x):
        h = self.body(x).flatten(2).mean(dim=2)
        return self.head(h)


class ConvEncoder2d(nn.Module):
    """4-block strided 2D encoder with a scalar head (slice scoring)."""

    def __init__(self, out_dim: int = 1, widths: tuple[int, ...] = (16, 32, 64, 64)):
        super().__init__()
        layers: list[nn.Module] = []
        cin = 1
        for w in widths:
            layers += [nn.Conv2d(cin, w, 4, stride=2, padding=1),
                       nn.GroupNorm(min(_GN_GROUPS, w), w), nn.SiLU()]
            cin = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(cin, out_dim)

    def forward(self, x):
        h = self.body(x).flatten(2).mean(dim=2)
        return self.head(h)
