"""Shared differentiable building blocks: bilinear warping, GDN/IGDN,
depth-separable convolutions, residual blocks, sub-pixel upsampling, masked
causal convolution and a small two-level U-Net.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

GDN_BETA_MIN = 1e-6
LEAKY_SLOPE = 0.01


def warp(feature: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp `feature` by a dense displacement field.

    feature: (B, C, H, W); flow: (B, 2, H, W) with flow[:, 0] = dx and
    flow[:, 1] = dy in pixels; output(p) samples feature at p + flow(p) with
    border replication.
    """
    if feature.shape[-2:] != flow.shape[-2:]:
        raise ValueError(
            f"flow spatial size {tuple(flow.shape[-2:])} does not match "
            f"feature {tuple(feature.shape[-2:])}"
        )
    b, _, h, w = flow.shape
    xs = torch.linspace(-1.0, 1.0, w, device=feature.device, dtype=feature.dtype)
    ys = torch.linspace(-1.0, 1.0, h, device=feature.device, dtype=feature.dtype)
    base_x = xs.view(1, 1, 1, w).expand(b, 1, h, w)
    base_y = ys.view(1, 1, h, 1).expand(b, 1, h, w)
    norm = torch.cat(
        [flow[:, 0:1] / ((w - 1.0) / 2.0), flow[:, 1:2] / ((h - 1.0) / 2.0)], dim=1
    )
    grid = (torch.cat([base_x, base_y], dim=1) + norm).permute(0, 2, 3, 1)
    # Border padding saturates outside [-1, 1], so pre-clamping is value- and
    # gradient-identical; it also keeps non-finite flows from reaching the
    # grid_sample backward kernel, which hard-crashes on NaN coordinates on
    # CPU instead of propagating them (divergence stays catchable upstream).
    grid = torch.nan_to_num(grid, nan=0.0, posinf=1.0, neginf=-1.0).clamp(-1.0, 1.0)
    return F.grid_sample(feature, grid, mode="bilinear", padding_mode="border", align_corners=True)


def rescale_flow(flow: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resize a flow field and scale its magnitude with resolution."""
    h, w = flow.shape[-2:]
    th, tw = size
    if (th, tw) == (h, w):
        return flow
    out = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    out = torch.cat([out[:, 0:1] * (tw / w), out[:, 1:2] * (th / h)], dim=1)
    return out


class GDN(nn.Module):
    """Generalized divisive normalization, y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2).

    Parameters are stored as offset square-roots so beta >= GDN_BETA_MIN and
    gamma >= 0 by construction. `inverse=True` multiplies instead of divides.
    """

    def __init__(self, channels: int, inverse: bool = False):
        super().__init__()
        self.inverse = inverse
        self.beta_sqrt = nn.Parameter(torch.ones(channels))
        gamma0 = 0.1 * torch.eye(channels)
        self.gamma_sqrt = nn.Parameter(torch.sqrt(gamma0))

    def norm_pool(self, x: torch.Tensor) -> torch.Tensor:
        c = x.shape[1]
        beta = self.beta_sqrt**2 + GDN_BETA_MIN
        gamma = (self.gamma_sqrt**2).view(c, c, 1, 1)
        return torch.sqrt(F.conv2d(x * x, gamma, beta))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pool = self.norm_pool(x)
        return x * pool if self.inverse else x / pool


class DepthConv(nn.Module):
    """Depth-separable convolution: per-channel spatial conv then 1x1 pointwise."""

    def __init__(self, channels_in: int, channels_out: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        self.depthwise = nn.Conv2d(
            channels_in, channels_in, kernel, stride=stride, padding=kernel // 2,
            groups=channels_in, bias=False,
        )
        self.pointwise = nn.Conv2d(channels_in, channels_out, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pointwise(self.depthwise(x))


class ResBlock(nn.Module):
    """Two 3x3 convs with a skip; the last conv is zero-initialized so the
    block is the identity at init."""

    def __init__(self, channels: int, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.act(self.conv1(x)))


def subpixel_upsample(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Pixel-shuffle C*r^2 x H x W -> C x rH x rW."""
    c = x.shape[1]
    if c % (factor * factor) != 0:
        raise ValueError(f"channel count {c} not divisible by {factor}^2")
    return F.pixel_shuffle(x, factor)


class SubpixelUp(nn.Module):
    """3x3 conv expanding channels then pixel shuffle (sub-pixel convolution)."""

    def __init__(self, channels_in: int, channels_out: int, factor: int = 2):
        super().__init__()
        self.conv = nn.Conv2d(channels_in, channels_out * factor * factor, 3, padding=1)
        self.factor = factor

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return subpixel_upsample(self.conv(x), self.factor)


class MaskedConv2d(nn.Conv2d):
    """Raster-causal convolution (mask type A): the output at p never sees the
    input at p or any later raster position."""

    def __init__(self, channels_in: int, channels_out: int, kernel: int = 5):
        super().__init__(channels_in, channels_out, kernel, padding=kernel // 2)
        mask = torch.zeros(1, 1, kernel, kernel)
        mask[:, :, : kernel // 2, :] = 1.0
        mask[:, :, kernel // 2, : kernel // 2] = 1.0
        self.register_buffer("mask", mask)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(
            x, self.weight * self.mask, self.bias, self.stride, self.padding
        )


class UNet(nn.Module):
    """Small two-level U-Net with skip concatenation, widths (C, 2C)."""

    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.enc1 = nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.LeakyReLU(LEAKY_SLOPE))
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.enc2 = nn.Sequential(nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.LeakyReLU(LEAKY_SLOPE))
        self.down2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid = nn.Sequential(nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.LeakyReLU(LEAKY_SLOPE))
        self.up2 = SubpixelUp(2 * c, 2 * c)
        self.dec2 = nn.Sequential(nn.Conv2d(4 * c, 2 * c, 3, padding=1), nn.LeakyReLU(LEAKY_SLOPE))
        self.up1 = SubpixelUp(2 * c, c)
        self.dec1 = nn.Conv2d(2 * c, c, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.enc1(x)
        e2 = self.enc2(self.down1(e1))
        m = self.mid(self.down2(e2))
        d2 = self.dec2(torch.cat([self.up2(m), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return x + d1


@dataclass
class BlockSpec:
    kind: str  # conv | depth_conv | resblock | gdn | igdn | subpixel_up | unet
    channels_in: int = 0
    channels_out: int = 0
    stride: int = 1
    kernel: int = 3

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")


def build_block(spec: BlockSpec) -> nn.Module:
    """Construct one parameterized block from its spec."""
    if spec.kind == "conv":
        if spec.channels_in <= 0 or spec.channels_out <= 0:
            raise ValueError("conv needs positive channel counts")
        return nn.Conv2d(
            spec.channels_in, spec.channels_out, spec.kernel,
            stride=spec.stride, padding=spec.kernel // 2,
        )
    if spec.kind == "depth_conv":
        return DepthConv(spec.channels_in, spec.channels_out, spec.kernel, spec.stride)
    if spec.kind == "resblock":
        return ResBlock(spec.channels_in)
    if spec.kind == "gdn":
        return GDN(spec.channels_in)
    if spec.kind == "igdn":
        return GDN(spec.channels_in, inverse=True)
    if spec.kind == "subpixel_up":
        return SubpixelUp(spec.channels_in, spec.channels_out)
    if spec.kind == "unet":
        return UNet(spec.channels_in)
    raise ValueError(f"unknown block kind {spec.kind!r}")
