"""Condition generation: from (propagated feature, reference frame, motion)
produce coding contexts at three scales with offset-diversity alignment.

The same parameters serve both sides; only the inputs differ — ground truth
(f, x, v) at the encoder versus reconstructions (f-hat, x-hat, v-hat) at the
decoder. Pinned shapes at an H x W frame with feature width Cf:

    C1: Cf   @ H   x W
    C2: 2Cf  @ H/2 x W/2
    C3: 4Cf  @ H/4 x W/4
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn

from .layers import LEAKY_SLOPE, ResBlock, warp

OFFSET_GROUPS = 4


class ContextSet(NamedTuple):
    c1: torch.Tensor
    c2: torch.Tensor
    c3: torch.Tensor


class ContextGenerator(nn.Module):
    def __init__(self, feature_channels: int = 48, groups: int = OFFSET_GROUPS):
        super().__init__()
        cf = feature_channels
        self.groups = groups
        self.frame_proj = nn.Conv2d(3, cf, 3, padding=1)
        # Offsets start at zero (zero-init head) so initial alignment is pure v.
        self.offset_net = nn.Sequential(
            nn.Conv2d(2 * cf + 2, 64, 3, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(64, 64, 3, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(64, 3 * groups, 3, padding=1),
        )
        nn.init.zeros_(self.offset_net[-1].weight)
        nn.init.zeros_(self.offset_net[-1].bias)
        self.group_fuse = nn.Conv2d(cf, cf, 1)
        self.extract1 = nn.Sequential(nn.Conv2d(2 * cf, cf, 3, padding=1), ResBlock(cf))
        self.extract2 = nn.Sequential(nn.Conv2d(cf, 2 * cf, 3, stride=2, padding=1), ResBlock(2 * cf))
        self.extract3 = nn.Sequential(nn.Conv2d(2 * cf, 4 * cf, 3, stride=2, padding=1), ResBlock(4 * cf))

    def forward(
        self,
        f_prev: torch.Tensor,
        x_prev: torch.Tensor,
        v: torch.Tensor,
        single_reference: bool = False,
    ) -> ContextSet:
        if f_prev.shape[-2:] != x_prev.shape[-2:] or f_prev.shape[-2:] != v.shape[-2:]:
            raise ValueError(
                f"inconsistent spatial sizes: feature {tuple(f_prev.shape[-2:])}, "
                f"frame {tuple(x_prev.shape[-2:])}, flow {tuple(v.shape[-2:])}"
            )
        x_feat = self.frame_proj(x_prev)
        f_aligned = warp(f_prev, v)
        x_aligned = warp(x_feat, v)
        if single_reference:
            combined = f_aligned
        else:
            pred = self.offset_net(torch.cat([f_aligned, x_aligned, v], dim=1))
            offsets, weights = pred[:, : 2 * self.groups], torch.sigmoid(pred[:, 2 * self.groups :])
            combined = torch.zeros_like(f_prev)
            for g in range(self.groups):
                vg = v + offsets[:, 2 * g : 2 * g + 2]
                combined = combined + weights[:, g : g + 1] * warp(f_prev, vg)
        combined = self.group_fuse(combined)
        c1 = self.extract1(torch.cat([combined, x_aligned], dim=1))
        c2 = self.extract2(c1)
        c3 = self.extract3(c2)
        return ContextSet(c1, c2, c3)


class TemporalPrior(nn.Module):
    """Strides the coarsest context down to latent resolution for the entropy
    model's temporal-prior input."""

    def __init__(self, feature_channels: int = 48, latent_channels: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(4 * feature_channels, latent_channels, 3, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(latent_channels, latent_channels, 3, stride=2, padding=1),
        )

    def forward(self, ctx: ContextSet) -> torch.Tensor:
        return self.net(ctx.c3)
