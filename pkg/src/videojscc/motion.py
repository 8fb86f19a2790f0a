"""Motion estimation between ground-truth frames and the motion-vector
transmission transforms.

The flow estimator is a 3-level coarse-to-fine pyramid; each level refines an
upsampled flow with a small 5-conv block. It only ever consumes ground-truth
frames at the encoder. Flows follow the (dx, dy) displacement convention of
`layers.warp`: warp(x_prev, v) approximates x_cur.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import GDN, DepthConv, ResBlock, SubpixelUp, UNet, warp


class FlowLevel(nn.Module):
    """Refines an upsampled flow from (cur, warped prev, flow) at one scale."""

    def __init__(self):
        super().__init__()
        widths = (16, 32, 16, 8)
        layers: list[nn.Module] = []
        c_in = 8  # 3 + 3 + 2
        for w in widths:
            layers += [nn.Conv2d(c_in, w, 5, padding=2), nn.LeakyReLU(0.1)]
            c_in = w
        layers.append(nn.Conv2d(c_in, 2, 5, padding=2))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class FlowEstimator(nn.Module):
    levels = 3

    def __init__(self):
        super().__init__()
        self.blocks = nn.ModuleList(FlowLevel() for _ in range(self.levels))

    def forward(self, x_prev: torch.Tensor, x_cur: torch.Tensor) -> torch.Tensor:
        if x_prev.shape != x_cur.shape:
            raise ValueError(
                f"frame shapes differ: {tuple(x_prev.shape)} vs {tuple(x_cur.shape)}"
            )
        prevs = [x_prev]
        curs = [x_cur]
        for _ in range(self.levels - 1):
            prevs.append(F.avg_pool2d(prevs[-1], 2))
            curs.append(F.avg_pool2d(curs[-1], 2))
        b, _, h, w = curs[-1].shape
        flow = x_prev.new_zeros(b, 2, h, w)
        for i, block in enumerate(self.blocks):
            lvl = self.levels - 1 - i
            if flow.shape[-2:] != curs[lvl].shape[-2:]:
                flow = 2.0 * F.interpolate(
                    flow, size=curs[lvl].shape[-2:], mode="bilinear", align_corners=False
                )
            warped = warp(prevs[lvl], flow)
            flow = flow + block(torch.cat([curs[lvl], warped, flow], dim=1))
        return flow


def estimate_motion(flow_net: FlowEstimator, x_prev: torch.Tensor, x_cur: torch.Tensor) -> torch.Tensor:
    return flow_net(x_prev, x_cur)


class MVEncoder(nn.Module):
    """Maps a dense flow field to a motion latent at 1/16 resolution."""

    def __init__(self, latent_channels: int = 64):
        super().__init__()
        c = latent_channels
        self.net = nn.Sequential(
            nn.Conv2d(2, 48, 5, stride=2, padding=2),
            GDN(48),
            nn.Conv2d(48, c, 3, stride=2, padding=1),
            GDN(c),
            ResBlock(c),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
            GDN(c),
            DepthConv(c, c),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
        )

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.net(v)


class MVDecoder(nn.Module):
    def __init__(self, latent_channels: int = 64):
        super().__init__()
        c = latent_channels
        self.net = nn.Sequential(
            SubpixelUp(c, c),
            GDN(c, inverse=True),
            ResBlock(c),
            SubpixelUp(c, c),
            GDN(c, inverse=True),
            SubpixelUp(c, 48),
            GDN(48, inverse=True),
            SubpixelUp(48, 16),
            UNet(16),
            nn.Conv2d(16, 2, 3, padding=1),
        )

    def forward(self, y_mv_hat: torch.Tensor) -> torch.Tensor:
        return self.net(y_mv_hat)


def endpoint_error(flow: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean Euclidean endpoint error in pixels."""
    return torch.sqrt(torch.sum((flow - target) ** 2, dim=1) + 1e-12).mean()
