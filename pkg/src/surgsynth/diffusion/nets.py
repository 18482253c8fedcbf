"""Small U-shaped noise predictor used for every diffusion model in the package.

The encoder is exposed separately from the decoder so that a control branch
can add residuals at each skip site and at the bottleneck.
"""

from __future__ import annotations

import math
from typing import Any, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCH_NAME = "tiny_unet"


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, cout)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Encoder(nn.Module):
    """Resolution levels plus bottleneck; returns one feature map per skip site."""

    def __init__(self, base_channels: int, channel_mults: Sequence[int], emb_dim: int):
        super().__init__()
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = base_channels
        self.site_channels: list[int] = []
        for i, mult in enumerate(channel_mults):
            out = base_channels * mult
            self.levels.append(ResBlock(ch, out, emb_dim))
            self.site_channels.append(out)
            ch = out
            if i < len(channel_mults) - 1:
                self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid = ResBlock(ch, ch, emb_dim)
        self.site_channels.append(ch)

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> list[torch.Tensor]:
        sites = []
        for i, block in enumerate(self.levels):
            h = block(h, emb)
            sites.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        sites.append(self.mid(h, emb))
        return sites


class TinyUNet(nn.Module):
    """Noise/velocity predictor with time and prompt embeddings added at every block.

    ``descriptor`` fully determines the architecture and is stored in
    checkpoint headers.
    """

    def __init__(
        self,
        in_channels: int = 3,
        out_channels: int = 3,
        base_channels: int = 16,
        channel_mults: Sequence[int] = (1, 2, 2),
        n_prompts: int = 2,
        image_size: int = 32,
    ):
        super().__init__()
        self.descriptor: dict[str, Any] = {
            "arch": ARCH_NAME,
            "in_channels": in_channels,
            "out_channels": out_channels,
            "base_channels": base_channels,
            "channel_mults": list(channel_mults),
            "n_prompts": n_prompts,
            "image_size": image_size,
        }
        emb_dim = base_channels * 4
        self.base_channels = base_channels
        self.time_mlp = nn.Sequential(
            nn.Linear(base_channels, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.prompt_embed = nn.Embedding(n_prompts, emb_dim)
        self.conv_in = nn.Conv2d(in_channels, base_channels, 3, padding=1)
        self.encoder = Encoder(base_channels, channel_mults, emb_dim)

        self.dec_levels = nn.ModuleList()
        self.ups = nn.ModuleList()
        ch = self.encoder.site_channels[-1]
        n = len(channel_mults)
        for i in reversed(range(n)):
            out = base_channels * channel_mults[i]
            self.dec_levels.append(ResBlock(ch + self.encoder.site_channels[i], out, emb_dim))
            ch = out
            if i > 0:
                self.ups.append(nn.Conv2d(ch, ch, 3, padding=1))
        self.norm_out = _norm(ch)
        self.conv_out = nn.Conv2d(ch, out_channels, 3, padding=1)

    @classmethod
    def from_descriptor(cls, descriptor: dict[str, Any]) -> "TinyUNet":
        kwargs = {k: v for k, v in descriptor.items() if k != "arch"}
        return cls(**kwargs)

    def embed(self, t: torch.Tensor, prompt_ids: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.base_channels)) + self.prompt_embed(prompt_ids)

    def stem(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv_in(x)

    def decode(self, sites: list[torch.Tensor], emb: torch.Tensor) -> torch.Tensor:
        h = sites[-1]
        skips = sites[:-1]
        n = len(skips)
        for j, block in enumerate(self.dec_levels):
            i = n - 1 - j
            h = block(torch.cat([h, skips[i]], dim=1), emb)
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[j](h)
        return self.conv_out(F.silu(self.norm_out(h)))

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        prompt_ids: torch.Tensor,
        control: Any = None,
    ) -> torch.Tensor:
        emb = self.embed(t, prompt_ids)
        stem = self.stem(x)
        sites = self.encoder(stem, emb)
        if control is not None:
            sites = control(stem, sites, emb)
        return self.decode(sites, emb)
