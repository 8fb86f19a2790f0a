"""Intra-frame analysis/synthesis transforms, the shared Refine head, and the
single-conv encoder-side feature projector.

The encoder maps a padded frame to a latent at 1/16 resolution through four
stride-2 stages with downsampled residual blocks and GDN; the decoder mirrors
it with sub-pixel upsampling, IGDN and a final U-Net, producing a
full-resolution feature map that Refine turns into pixels.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .layers import GDN, LEAKY_SLOPE, DepthConv, ResBlock, SubpixelUp, UNet


class IFrameEncoder(nn.Module):
    def __init__(self, latent_channels: int = 64):
        super().__init__()
        c = latent_channels
        self.stage1 = nn.Sequential(nn.Conv2d(3, 48, 5, stride=2, padding=2), GDN(48))
        self.stage2 = nn.Sequential(
            ResBlock(48), nn.Conv2d(48, c, 3, stride=2, padding=1), GDN(c)
        )
        self.stage3 = nn.Sequential(
            ResBlock(c), nn.Conv2d(c, c, 3, stride=2, padding=1), GDN(c)
        )
        self.stage4 = nn.Sequential(DepthConv(c, c), nn.Conv2d(c, c, 3, stride=2, padding=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stage4(self.stage3(self.stage2(self.stage1(x))))


class IFrameDecoder(nn.Module):
    def __init__(self, latent_channels: int = 64, feature_channels: int = 48):
        super().__init__()
        c, cf = latent_channels, feature_channels
        self.stage1 = nn.Sequential(DepthConv(c, c), SubpixelUp(c, c), GDN(c, inverse=True))
        self.stage2 = nn.Sequential(ResBlock(c), SubpixelUp(c, c), GDN(c, inverse=True))
        self.stage3 = nn.Sequential(ResBlock(c), SubpixelUp(c, cf), GDN(cf, inverse=True))
        self.stage4 = nn.Sequential(SubpixelUp(cf, cf), UNet(cf))

    def forward(self, y_hat: torch.Tensor) -> torch.Tensor:
        return self.stage4(self.stage3(self.stage2(self.stage1(y_hat))))


class Refine(nn.Module):
    """Three convolutions with one residual connection, shared between the
    I- and P-frame reconstruction paths. Output is clamped to [0, 1]."""

    def __init__(self, feature_channels: int = 48):
        super().__init__()
        cf = feature_channels
        self.conv1 = nn.Conv2d(cf, cf, 3, padding=1)
        self.conv2 = nn.Conv2d(cf, cf, 3, padding=1)
        self.conv3 = nn.Conv2d(cf, 3, 3, padding=1)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, f_hat: torch.Tensor) -> torch.Tensor:
        h = self.act(self.conv1(f_hat))
        h = h + self.act(self.conv2(h))
        return torch.clamp(self.conv3(h), 0.0, 1.0)


class ProjI(nn.Module):
    """Single convolution producing the encoder-side propagated I-frame feature."""

    def __init__(self, feature_channels: int = 48):
        super().__init__()
        self.conv = nn.Conv2d(3, feature_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)
