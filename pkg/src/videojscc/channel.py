"""Wireless transmission substrate: power normalization, AWGN and block-fading
Rayleigh transition functions, CSNR conversion, and the error-free digital side
channel used for masks.

One real latent element counts as one channel use; complex pairing only affects
the Rayleigh fading draw. All operations are pure functions of
(input, config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch


class ChannelError(Exception):
    pass


# |h| is clamped below before equalization so 1/h cannot blow up the noise.
RAYLEIGH_MIN_GAIN = 0.05
_POWER_EPS = 1e-12


@dataclass
class ChannelSymbols:
    """A flat block of real channel symbols for one frame payload.

    `scale` records the power-normalization gain applied at the transmitter;
    the receiver divides it back out (ideal automatic gain control).
    """

    values: torch.Tensor
    frame_index: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ChannelError(f"symbols must be a flat array, got shape {tuple(self.values.shape)}")


@dataclass
class ChannelConfig:
    kind: str = "awgn"  # awgn | rayleigh
    csnr_db: float = 10.0
    power: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("awgn", "rayleigh"):
            raise ChannelError(f"unknown channel kind {self.kind!r}")
        if self.power <= 0:
            raise ChannelError("channel power must be positive")

    @property
    def sigma2(self) -> float:
        return sigma_from_csnr(self.csnr_db)


def sigma_from_csnr(csnr_db: float) -> float:
    """Noise variance for unit signal power: sigma^2 = 10^(-CSNR/10).

    +inf is accepted and maps to a noiseless channel.
    """
    if math.isnan(csnr_db):
        raise ChannelError("CSNR must not be NaN")
    return float(10.0 ** (-csnr_db / 10.0))


def power_normalize(s: torch.Tensor, power: float = 1.0, frame_index: int = 0) -> ChannelSymbols:
    """Scale so the mean squared symbol equals `power` (all-zero input passes through)."""
    if s.numel() == 0:
        raise ChannelError("cannot normalize an empty symbol block")
    flat = s.reshape(-1)
    energy = torch.sum(flat * flat)
    scale = torch.sqrt(power * flat.numel() / torch.clamp(energy, min=_POWER_EPS))
    if float(energy.detach()) == 0.0:
        return ChannelSymbols(flat.clone(), frame_index, scale=1.0)
    return ChannelSymbols(flat * scale, frame_index, scale=float(scale.detach()))


def _generator(seed: Optional[int]) -> Optional[torch.Generator]:
    if seed is None:
        return None
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return g


def awgn(s: ChannelSymbols, sigma2: float, seed: Optional[int] = None) -> ChannelSymbols:
    """hat_s = s + N with N iid zero-mean Gaussian of variance sigma2."""
    if sigma2 < 0:
        raise ChannelError("noise variance must be >= 0")
    if sigma2 == 0.0:
        return ChannelSymbols(s.values.clone(), s.frame_index, s.scale)
    noise = torch.randn(s.values.shape, generator=_generator(seed), dtype=s.values.dtype)
    return ChannelSymbols(s.values + math.sqrt(sigma2) * noise, s.frame_index, s.scale)


def draw_fading(seed: Optional[int] = None) -> complex:
    """One circularly-symmetric complex Gaussian block-fading coefficient,
    unit variance (E[|h|^2] = 1), drawn once per frame."""
    hr, hi = torch.randn(2, generator=_generator(seed), dtype=torch.float64)
    return complex(float(hr), float(hi)) / math.sqrt(2.0)


def rayleigh(
    s: ChannelSymbols,
    sigma2: float,
    seed: Optional[int] = None,
    h_override: Optional[complex] = None,
) -> ChannelSymbols:
    """Block-fading Rayleigh channel with perfect-CSI equalization.

    Consecutive real pairs form one complex use; h ~ CN(0, 1) is drawn once per
    frame. The receiver computes y / h with |h| clamped at RAYLEIGH_MIN_GAIN.
    """
    if sigma2 < 0:
        raise ChannelError("noise variance must be >= 0")
    n = s.values.numel()
    if n % 2 != 0:
        raise ChannelError(f"rayleigh needs an even symbol count, got {n}")
    gen = _generator(seed)
    if h_override is None:
        hr, hi = torch.randn(2, generator=gen, dtype=torch.float64)
        h = complex(float(hr), float(hi)) / math.sqrt(2.0)
    else:
        h = complex(h_override)
    x = s.values.reshape(-1, 2)
    xc = torch.complex(x[:, 0].double(), x[:, 1].double())
    y = h * xc
    if sigma2 > 0:
        noise = torch.randn(n, generator=gen, dtype=torch.float64) * math.sqrt(sigma2)
        y = y + torch.complex(noise[::2], noise[1::2])
    mag = abs(h)
    h_eq = h * (max(mag, RAYLEIGH_MIN_GAIN) / mag) if mag > 0 else complex(RAYLEIGH_MIN_GAIN, 0.0)
    xeq = y / h_eq
    out = torch.stack([xeq.real, xeq.imag], dim=1).reshape(-1).to(s.values.dtype)
    return ChannelSymbols(out, s.frame_index, s.scale)


def transmit(symbols: ChannelSymbols, config: ChannelConfig, seed: Optional[int] = None) -> ChannelSymbols:
    """Run one payload through the configured channel and undo the AGC gain."""
    sigma2 = config.sigma2
    if config.kind == "awgn":
        received = awgn(symbols, sigma2, seed)
    else:
        pad = symbols.values.numel() % 2
        if pad:
            padded = ChannelSymbols(
                torch.cat([symbols.values, symbols.values.new_zeros(1)]),
                symbols.frame_index,
                symbols.scale,
            )
            received = rayleigh(padded, sigma2, seed)
            received = ChannelSymbols(received.values[:-1], symbols.frame_index, symbols.scale)
        else:
            received = rayleigh(symbols, sigma2, seed)
    return ChannelSymbols(received.values / symbols.scale, symbols.frame_index, symbols.scale)


def side_channel(mask_bytes: bytes) -> bytes:
    """Ideal error-free digital side channel for mask/gain metadata."""
    return bytes(mask_bytes)
