"""Conditional P-frame transforms and the encoder-side projector.

Contexts are injected by concatenation at the stages whose resolutions match.
The decoder mirrors the encoder with sub-pixel upsampling and carries two
U-Nets; the projector shares that structure (not its parameters) but consumes
the clean latent and encoder-side contexts.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .context import ContextSet
from .layers import GDN, DepthConv, ResBlock, SubpixelUp, UNet


class PFrameEncoder(nn.Module):
    def __init__(self, latent_channels: int = 64, feature_channels: int = 48):
        super().__init__()
        c, cf = latent_channels, feature_channels
        self.stage1 = nn.Sequential(nn.Conv2d(3 + cf, c, 3, stride=2, padding=1), GDN(c))
        self.stage2 = nn.Sequential(
            ResBlock(c + 2 * cf), nn.Conv2d(c + 2 * cf, c, 3, stride=2, padding=1), GDN(c)
        )
        self.stage3 = nn.Sequential(
            ResBlock(c + 4 * cf), nn.Conv2d(c + 4 * cf, c, 3, stride=2, padding=1), GDN(c)
        )
        self.stage4 = nn.Sequential(DepthConv(c, c), nn.Conv2d(c, c, 3, stride=2, padding=1))

    def forward(self, x: torch.Tensor, ctx: ContextSet) -> torch.Tensor:
        h = self.stage1(torch.cat([x, ctx.c1], dim=1))
        h = self.stage2(torch.cat([h, ctx.c2], dim=1))
        h = self.stage3(torch.cat([h, ctx.c3], dim=1))
        return self.stage4(h)


class ConditionalDecoder(nn.Module):
    """Shared structure of the P-frame decoder and the encoder-side projector:
    latent at 1/16 + three contexts -> feature at full resolution."""

    def __init__(self, latent_channels: int = 64, feature_channels: int = 48):
        super().__init__()
        c, cf = latent_channels, feature_channels
        self.up1 = nn.Sequential(DepthConv(c, c), SubpixelUp(c, c), GDN(c, inverse=True))
        self.up2 = nn.Sequential(SubpixelUp(c, c), GDN(c, inverse=True))
        self.fuse3 = nn.Sequential(ResBlock(c + 4 * cf), nn.Conv2d(c + 4 * cf, c, 3, padding=1))
        self.unet_a = UNet(c)
        self.up3 = nn.Sequential(SubpixelUp(c, c), GDN(c, inverse=True))
        self.fuse2 = nn.Sequential(ResBlock(c + 2 * cf), nn.Conv2d(c + 2 * cf, c, 3, padding=1))
        self.up4 = SubpixelUp(c, cf)
        self.fuse1 = nn.Conv2d(2 * cf, cf, 3, padding=1)
        self.unet_b = UNet(cf)

    def forward(self, y: torch.Tensor, ctx: ContextSet) -> torch.Tensor:
        h = self.up2(self.up1(y))
        h = self.unet_a(self.fuse3(torch.cat([h, ctx.c3], dim=1)))
        h = self.up3(h)
        h = self.fuse2(torch.cat([h, ctx.c2], dim=1))
        h = self.up4(h)
        h = self.fuse1(torch.cat([h, ctx.c1], dim=1))
        return self.unet_b(h)


class PFrameDecoder(ConditionalDecoder):
    pass


class ProjP(ConditionalDecoder):
    pass
