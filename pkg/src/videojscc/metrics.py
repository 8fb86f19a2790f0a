"""Quality metrics and channel-bandwidth accounting.

PSNR and MS-SSIM are computed in RGB on the [0, 1] scale. The channel
bandwidth ratio of a frame is

    R_t = popcount(mask) * (H/16) * (W/16) / (3 * H * W)

and for P-frames the MV payload's ratio (same formula with the MV mask) is
added on top by the pipeline.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

import torch
import torch.nn.functional as F

from .videodata import Frame

PSNR_CAP_DB = 100.0

# Canonical 5-scale MS-SSIM weights.
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


class MetricsError(Exception):
    pass


@dataclass
class FrameStats:
    frame_index: int
    cbr: float
    psnr_db: float
    ms_ssim: float
    side_channel_bytes: int


def psnr(x: Frame | torch.Tensor, x_hat: Frame | torch.Tensor) -> float:
    """10*log10(1/MSE) on [0, 1]; identical inputs are capped at 100 dB."""
    a = x.pixels if isinstance(x, Frame) else x
    b = x_hat.pixels if isinstance(x_hat, Frame) else x_hat
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    if mse <= 0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(device, dtype) -> torch.Tensor:
    half = _SSIM_WINDOW // 2
    coords = torch.arange(-half, half + 1, device=device, dtype=dtype)
    g = torch.exp(-(coords**2) / (2 * _SSIM_SIGMA**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _ssim_cs(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    c = a.shape[1]
    win = _gaussian_window(a.device, a.dtype).expand(c, 1, _SSIM_WINDOW, _SSIM_WINDOW)
    mu_a = F.conv2d(a, win, groups=c)
    mu_b = F.conv2d(b, win, groups=c)
    var_a = F.conv2d(a * a, win, groups=c) - mu_a**2
    var_b = F.conv2d(b * b, win, groups=c) - mu_b**2
    cov = F.conv2d(a * b, win, groups=c) - mu_a * mu_b
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum.mean(), cs.mean()


def ms_ssim(x: Frame | torch.Tensor, x_hat: Frame | torch.Tensor, scales: int = 5) -> float:
    """Multi-scale SSIM with the canonical weights; the number of scales is
    reduced (and weights renormalized) when the image is too small."""
    a = (x.pixels if isinstance(x, Frame) else x).double().unsqueeze(0)
    b = (x_hat.pixels if isinstance(x_hat, Frame) else x_hat).double().unsqueeze(0)
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    min_dim = min(a.shape[-2], a.shape[-1])
    if min_dim < _SSIM_WINDOW:
        raise MetricsError(f"image min dimension {min_dim} smaller than the {_SSIM_WINDOW}px window")
    usable = min(scales, 1 + int(math.floor(math.log2(min_dim / _SSIM_WINDOW))))
    usable = max(usable, 1)
    weights = torch.tensor(MSSSIM_WEIGHTS[:usable], dtype=torch.float64)
    weights = weights / weights.sum()
    vals = []
    for s in range(usable):
        lum, cs = _ssim_cs(a, b)
        vals.append(lum if s == usable - 1 else cs)
        if s != usable - 1:
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
    score = torch.prod(torch.stack([v.clamp(min=1e-8) ** w for v, w in zip(vals, weights)]))
    return float(score.clamp(0.0, 1.0))


def frame_cbr(mask_bits, height: int, width: int) -> float:
    """Bandwidth ratio of one latent payload given its channel keep-mask."""
    if height % 16 or width % 16:
        raise MetricsError(f"frame size {height}x{width} is not a multiple of 16")
    bits = mask_bits.bits if hasattr(mask_bits, "bits") else mask_bits
    popcount = int(sum(int(b) for b in bits))
    return popcount * (height // 16) * (width // 16) / (3.0 * height * width)


def gop_cbr(stats: list[FrameStats]) -> float:
    """Arithmetic mean of per-frame bandwidth ratios over one GOP."""
    if not stats:
        raise MetricsError("gop_cbr needs at least one frame")
    return sum(s.cbr for s in stats) / len(stats)


STATS_CSV_HEADER = [f.name for f in fields(FrameStats)]


def write_stats_csv(stats: list[FrameStats], path: str | Path) -> None:
    """Emit one row per frame: frame_index,cbr,psnr_db,ms_ssim,side_channel_bytes."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATS_CSV_HEADER)
        for s in stats:
            writer.writerow(
                [s.frame_index, f"{s.cbr:.10g}", f"{s.psnr_db:.10g}", f"{s.ms_ssim:.10g}", s.side_channel_bytes]
            )


def read_stats_csv(path: str | Path) -> list[FrameStats]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                FrameStats(
                    frame_index=int(row["frame_index"]),
                    cbr=float(row["cbr"]),
                    psnr_db=float(row["psnr_db"]),
                    ms_ssim=float(row["ms_ssim"]),
                    side_channel_bytes=int(row["side_channel_bytes"]),
                )
            )
    return out
