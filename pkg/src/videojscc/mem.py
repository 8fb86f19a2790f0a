"""Mask-based entropy module: entropy-parameter estimation with
hyper/autoregressive/temporal prior fusion, the Gumbel-Softmax channel gating
policy, symbol emission/reception and the bit-exact mask wire format.

Wire format for one mask (little-endian):

    magic u16 = 0x4A4D | frame_index u32 | channel count C u16 |
    bitmap, channel i stored at byte i//8, bit i%8, zero-padded to a byte

The entropy model runs only at the encoder; the receiver needs nothing beyond
the mask (and the scalar AGC gain), both delivered over the error-free side
channel.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .channel import power_normalize
from .layers import LEAKY_SLOPE, MaskedConv2d, SubpixelUp

MASK_MAGIC = 0x4A4D
SIGMA2_MIN = 1e-6
SIGMA2_MAX = 1e6  # exp-link bounded on both sides so summaries stay finite
GAIN_BYTES = 4  # float32 AGC gain rides the side channel next to the mask


class MemError(Exception):
    pass


class EntropyParams(NamedTuple):
    mu: torch.Tensor  # (B, C, h, w)
    sigma2: torch.Tensor  # (B, C, h, w), >= SIGMA2_MIN


@dataclass
class Mask:
    """Per-channel binary keep/drop decisions for one latent."""

    bits: torch.Tensor  # (C,) values in {0, 1}
    frame_index: int = 0

    def __post_init__(self):
        self.bits = self.bits.detach().to(torch.uint8).reshape(-1)

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def __len__(self) -> int:
        return self.bits.numel()


@dataclass
class TransmitPayload:
    """Retained channels of y-tilde, flattened in ascending channel order
    (row-major spatially), after power normalization."""

    symbols: torch.Tensor  # (popcount * h * w,)
    mask: Mask
    latent_shape: tuple[int, int]  # (h, w) of the latent grid
    gain: float = 1.0

    @property
    def side_channel_bytes(self) -> int:
        return len(serialize_mask(self.mask)) + GAIN_BYTES


def serialize_mask(m: Mask) -> bytes:
    c = len(m)
    if c > 0xFFFF:
        raise MemError(f"cannot serialize {c} channels (max 65535)")
    header = struct.pack("<HIH", MASK_MAGIC, m.frame_index, c)
    bitmap = bytearray((c + 7) // 8)
    for i, bit in enumerate(m.bits.tolist()):
        if bit:
            bitmap[i // 8] |= 1 << (i % 8)
    return header + bytes(bitmap)


def deserialize_mask(data: bytes) -> Mask:
    if len(data) < 8:
        raise MemError(f"mask blob truncated at {len(data)} bytes")
    magic, frame_index, c = struct.unpack_from("<HIH", data, 0)
    if magic != MASK_MAGIC:
        raise MemError(f"bad mask magic 0x{magic:04X}")
    nbytes = (c + 7) // 8
    if len(data) < 8 + nbytes:
        raise MemError(f"mask bitmap truncated: need {nbytes} bytes, have {len(data) - 8}")
    bits = torch.zeros(c, dtype=torch.uint8)
    for i in range(c):
        bits[i] = (data[8 + i // 8] >> (i % 8)) & 1
    return Mask(bits, frame_index)


class EntropyModel(nn.Module):
    """Estimates per-element Gaussian parameters of a latent by fusing a
    hyper prior (encoder-local, never transmitted), a raster-causal
    autoregressive prior and, for P-frames, a temporal prior.

    mode="parallel" zeroes the autoregressive context (used for mask
    decisions); mode="autoregressive" uses the causal context (used for NLL
    pretraining/evaluation).
    """

    def __init__(self, channels: int, with_temporal: bool = False):
        super().__init__()
        c = channels
        self.channels = c
        self.with_temporal = with_temporal
        self.hyper_enc = nn.Sequential(
            nn.Conv2d(c, c, 3, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
        )
        self.hyper_dec = nn.Sequential(
            SubpixelUp(c, c),
            nn.LeakyReLU(LEAKY_SLOPE),
            SubpixelUp(c, c),
        )
        self.context = MaskedConv2d(c, c, kernel=5)
        fuse_in = c * (3 if with_temporal else 2)
        # 1x1 fusion keeps the autoregressive branch's causality intact.
        self.fusion = nn.Sequential(
            nn.Conv2d(fuse_in, 2 * c, 1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(2 * c, 2 * c, 1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(2 * c, 2 * c, 1),
        )

    def autoregressive_features(self, y: torch.Tensor) -> torch.Tensor:
        return self.context(y)

    def forward(
        self,
        y: torch.Tensor,
        temporal: Optional[torch.Tensor] = None,
        mode: str = "parallel",
    ) -> EntropyParams:
        if mode not in ("parallel", "autoregressive"):
            raise MemError(f"unknown entropy mode {mode!r}")
        if self.with_temporal and temporal is None:
            raise MemError("this entropy model requires a temporal prior input")
        if not self.with_temporal and temporal is not None:
            raise MemError("temporal prior passed to a model built without one")
        hyper = self.hyper_dec(self.hyper_enc(y))
        if hyper.shape[-2:] != y.shape[-2:]:
            hyper = hyper[..., : y.shape[-2], : y.shape[-1]]
        ar = self.autoregressive_features(y) if mode == "autoregressive" else torch.zeros_like(y)
        parts = [hyper, ar]
        if self.with_temporal:
            if temporal.shape[-2:] != y.shape[-2:]:
                raise MemError(
                    f"temporal prior spatial {tuple(temporal.shape[-2:])} "
                    f"does not match latent {tuple(y.shape[-2:])}"
                )
            parts.append(temporal)
        mu, log_sigma2 = self.fusion(torch.cat(parts, dim=1)).chunk(2, dim=1)
        log_sigma2 = log_sigma2.clamp(min=math.log(SIGMA2_MIN), max=math.log(SIGMA2_MAX))
        sigma2 = torch.exp(log_sigma2)
        return EntropyParams(mu, sigma2)


def gaussian_nll(y: torch.Tensor, params: EntropyParams) -> torch.Tensor:
    """Mean per-element Gaussian negative log-likelihood in nats."""
    var = params.sigma2
    return torch.mean(0.5 * math.log(2.0 * math.pi) + 0.5 * torch.log(var) + (y - params.mu) ** 2 / (2 * var))


def channel_entropy_summary(params: EntropyParams) -> torch.Tensor:
    """Per-channel statistics feeding the policy network: spatial means of mu,
    of sigma^2, and of the Gaussian differential entropy 0.5*ln(2*pi*e*sigma^2).

    Returns (B, C, 3).
    """
    mu_mean = params.mu.mean(dim=(-2, -1))
    var_mean = params.sigma2.mean(dim=(-2, -1))
    entropy = (0.5 * torch.log(2.0 * math.pi * math.e * params.sigma2)).mean(dim=(-2, -1))
    return torch.stack([mu_mean, var_mean, entropy], dim=-1)


class PolicyNet(nn.Module):
    """Shared per-channel 2-class (keep/drop) head over the statistics vector.

    Logits are soft-bounded to +-LOGIT_RANGE so keep probabilities never
    saturate fully and the straight-through gradient cannot die (a collapsed
    all-drop policy would otherwise be unrecoverable).
    """

    LOGIT_RANGE = 4.0

    def __init__(self, stat_dim: int = 3, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(stat_dim, hidden),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(hidden, 2),
        )
        # Start keep-leaning (keep prob ~0.97) so early training transmits at
        # near-full rate; rate pressure prunes from there.
        with torch.no_grad():
            self.net[-1].bias.copy_(torch.tensor([4.0, 0.0]))

    def forward(self, summary: torch.Tensor) -> torch.Tensor:
        raw = self.net(summary)  # (B, C, 2), [..., 0]=keep, [..., 1]=drop
        return self.LOGIT_RANGE * torch.tanh(raw / self.LOGIT_RANGE)


class MaskDecision(NamedTuple):
    hard: torch.Tensor  # (B, C) binary, straight-through in train mode
    keep_prob: torch.Tensor  # (B, C) soft keep probabilities


def policy_mask(
    logits: torch.Tensor,
    temperature: float = 1.0,
    mode: str = "eval",
    seed: Optional[int] = None,
) -> MaskDecision:
    """Turn per-channel keep/drop logits into a binary mask.

    Train mode samples straight-through Gumbel-Softmax (hard forward, soft
    gradient); eval mode is a deterministic argmax.
    """
    if temperature <= 0:
        raise MemError("Gumbel temperature must be > 0")
    keep_prob = torch.softmax(logits, dim=-1)[..., 0]
    if mode == "eval":
        hard = (logits[..., 0] > logits[..., 1]).to(logits.dtype).detach()
        return MaskDecision(hard, keep_prob)
    if mode != "train":
        raise MemError(f"unknown policy mode {mode!r}")
    if seed is None:
        expo = torch.empty_like(logits).exponential_()
    else:
        gen = torch.Generator(device="cpu")
        gen.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        expo = torch.empty(logits.shape, dtype=logits.dtype).exponential_(generator=gen)
    gumbel = -torch.log(expo.clamp(min=1e-20))
    soft = torch.softmax((logits + gumbel) / temperature, dim=-1)
    index = soft.argmax(dim=-1, keepdim=True)
    hard = torch.zeros_like(soft).scatter_(-1, index, 1.0)
    straight = hard - soft.detach() + soft
    return MaskDecision(straight[..., 0], soft[..., 0])


class MEMEncoder(nn.Module):
    """Transforms the latent with a small conv stack, gates channels with the
    mask, and packs retained channels into a power-normalized payload."""

    def __init__(self, channels: int, linear: bool = False):
        super().__init__()
        if linear:
            self.transform = nn.Conv2d(channels, channels, 1, bias=False)
        else:
            self.transform = nn.Sequential(
                nn.Conv2d(channels, channels, 3, padding=1),
                nn.LeakyReLU(LEAKY_SLOPE),
                nn.Conv2d(channels, channels, 3, padding=1),
            )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.transform(y)

    def apply_mask(self, tilde_y: torch.Tensor, mask_bits: torch.Tensor) -> torch.Tensor:
        """z = y-tilde * m broadcast over space; differentiable in both."""
        return tilde_y * mask_bits.view(*mask_bits.shape, 1, 1)

    def pack(self, tilde_y: torch.Tensor, mask: Mask, power: float = 1.0) -> TransmitPayload:
        """Physically drop masked channels and power-normalize (batch of 1)."""
        if tilde_y.ndim != 4 or tilde_y.shape[0] != 1:
            raise MemError("payload packing expects a single-sample (1, C, h, w) latent")
        keep = mask.bits.to(torch.bool)
        if keep.numel() != tilde_y.shape[1]:
            raise MemError(
                f"mask has {keep.numel()} channels but latent has {tilde_y.shape[1]}"
            )
        h, w = tilde_y.shape[-2:]
        kept = tilde_y[0, keep].reshape(-1)
        if kept.numel() == 0:
            return TransmitPayload(kept, mask, (h, w), gain=1.0)
        symbols = power_normalize(kept, power, mask.frame_index)
        return TransmitPayload(symbols.values, mask, (h, w), gain=symbols.scale)

    def encode(self, y: torch.Tensor, mask: Mask, power: float = 1.0) -> TransmitPayload:
        return self.pack(self.forward(y), mask, power)


class MEMDecoder(nn.Module):
    """Scatters received channels back to their indices (zeros elsewhere) and
    synthesizes the reconstructed latent."""

    def __init__(self, channels: int, linear: bool = False):
        super().__init__()
        self.channels = channels
        if linear:
            self.synthesis = nn.Conv2d(channels, channels, 1, bias=False)
        else:
            self.synthesis = nn.Sequential(
                nn.Conv2d(channels, channels, 3, padding=1),
                nn.LeakyReLU(LEAKY_SLOPE),
                nn.Conv2d(channels, channels, 3, padding=1),
            )

    def scatter(self, payload: TransmitPayload, expected_channels: int) -> torch.Tensor:
        h, w = payload.latent_shape
        keep = payload.mask.bits.to(torch.bool)
        if keep.numel() != expected_channels:
            raise MemError(
                f"mask covers {keep.numel()} channels, expected {expected_channels}"
            )
        n_expected = int(keep.sum()) * h * w
        if payload.symbols.numel() != n_expected:
            raise MemError(
                f"payload carries {payload.symbols.numel()} symbols, "
                f"mask implies {n_expected}"
            )
        dense = payload.symbols.new_zeros(1, expected_channels, h, w)
        if n_expected:
            dense[0, keep] = payload.symbols.reshape(int(keep.sum()), h, w)
        return dense

    def forward(self, dense: torch.Tensor) -> torch.Tensor:
        return self.synthesis(dense)

    def decode(self, payload: TransmitPayload, expected_channels: int) -> torch.Tensor:
        return self.forward(self.scatter(payload, expected_channels))


class MEM(nn.Module):
    """One complete mask-based entropy module instance (per codec path)."""

    def __init__(self, channels: int, with_temporal: bool = False, linear_stacks: bool = False):
        super().__init__()
        self.channels = channels
        self.entropy = EntropyModel(channels, with_temporal=with_temporal)
        self.policy = PolicyNet()
        self.encoder = MEMEncoder(channels, linear=linear_stacks)
        self.decoder = MEMDecoder(channels, linear=linear_stacks)

    def decide_mask(
        self,
        y: torch.Tensor,
        temporal: Optional[torch.Tensor],
        mode: str = "eval",
        temperature: float = 1.0,
        seed: Optional[int] = None,
    ) -> tuple[MaskDecision, EntropyParams]:
        params = self.entropy(y, temporal, mode="parallel")
        logits = self.policy(channel_entropy_summary(params))
        return policy_mask(logits, temperature, mode, seed), params

    def tie_linear_inverse(self) -> None:
        """Test configuration: set the (linear) synthesis to the exact inverse
        of the (linear) analysis transform."""
        if not isinstance(self.encoder.transform, nn.Conv2d):
            raise MemError("tie_linear_inverse requires linear_stacks=True")
        w = self.encoder.transform.weight.squeeze(-1).squeeze(-1)
        inv = torch.linalg.inv(w.double()).float()
        with torch.no_grad():
            self.decoder.synthesis.weight.copy_(inv.unsqueeze(-1).unsqueeze(-1))
