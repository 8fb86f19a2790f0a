"""End-to-end GOP orchestration: I-frame transmission, then per-P-frame motion
estimation, MV transmission, asymmetric context generation, conditional
coding, masking, channel, decoding, refinement and dual-side state
propagation.

The encoder side only ever touches ground-truth-derived values; the decoder
side only channel-derived values. Within a frame the MV payload is transmitted
before the frame payload, each with an independent noise draw.

Payload archive container (little-endian): magic "VJSA" | u16 version=1 |
u32 payload count, then per payload: u32 mask-blob length | mask wire bytes |
float32 gain | u16 latent h | u16 latent w | u32 symbol count | float32
symbols (ascending channel order, row-major spatially).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import torch

from . import channel as ch
from .context import ContextSet
from .mem import (
    MEM,
    GAIN_BYTES,
    Mask,
    MaskDecision,
    TransmitPayload,
    deserialize_mask,
    gaussian_nll,
    serialize_mask,
)
from .metrics import FrameStats, frame_cbr, ms_ssim, psnr
from .models import VideoCodec
from .videodata import Frame, FrameSequence, Gop, crop_back, pad_to_multiple, slice_gops

ARCHIVE_MAGIC = b"VJSA"
ARCHIVE_VERSION = 1


class PipelineError(Exception):
    pass


@dataclass
class EncoderPipelineState:
    """Ground-truth frame and encoder feature; never touches channel outputs."""

    prev_frame: torch.Tensor  # (B, 3, H, W)
    prev_feature: torch.Tensor  # (B, Cf, H, W)


@dataclass
class DecoderPipelineState:
    """Reconstruction and decoder feature; never touches ground truth."""

    prev_frame: torch.Tensor
    prev_feature: torch.Tensor


@dataclass
class FrameOutput:
    """Everything produced while coding one frame (training keeps the graph)."""

    frame_index: int
    is_iframe: bool
    x_hat: torch.Tensor
    latent: torch.Tensor
    latent_hat: torch.Tensor
    latent_mask: torch.Tensor  # (B, C) hard bits (straight-through in train)
    soft_rate: torch.Tensor  # differentiable R_t (keep-probability based)
    hard_cbr: float
    enc_feature: torch.Tensor
    dec_feature: torch.Tensor
    mv_latent: Optional[torch.Tensor] = None
    mv_mask: Optional[torch.Tensor] = None
    flow: Optional[torch.Tensor] = None
    flow_hat: Optional[torch.Tensor] = None
    nll_aux: Optional[torch.Tensor] = None
    side_channel_bytes: int = 0
    payloads: list[TransmitPayload] = field(default_factory=list)


@dataclass
class GopResult:
    reconstructions: list[Frame]
    stats: list[FrameStats]
    payloads: Optional[list[list[TransmitPayload]]] = None


def derive_seed(base: int, frame_index: int, stream: int) -> int:
    return (base * 1000003 + frame_index * 8191 + stream * 131071 + 0x5EED) & 0x7FFFFFFF


def _mask_from_decision(decision: MaskDecision, frame_index: int) -> Mask:
    return Mask(decision.hard[0].detach(), frame_index)


def soft_rate_of(keep_prob: torch.Tensor, latent_hw: tuple[int, int], frame_hw: tuple[int, int]) -> torch.Tensor:
    """Differentiable bandwidth ratio: popcount replaced by summed keep-probs."""
    h16, w16 = latent_hw
    h, w = frame_hw
    return keep_prob.sum(dim=-1).mean() * (h16 * w16) / (3.0 * h * w)


def override_mask_bits(mode: str, batch: int, channels: int, fixed_channels: int) -> torch.Tensor:
    if mode == "all_ones":
        return torch.ones(batch, channels)
    if mode == "first_k":
        bits = torch.zeros(batch, channels)
        bits[:, :fixed_channels] = 1.0
        return bits
    raise PipelineError(f"unknown mask override {mode!r}")


def _transmit_latent(
    y: torch.Tensor,
    mem: MEM,
    temporal: Optional[torch.Tensor],
    cfg: ch.ChannelConfig,
    frame_index: int,
    noise_seed: Optional[int],
    mask_seed: Optional[int],
    train: bool,
    tau: float,
    mask_mode: str,
    fixed_channels: int,
    force_all_ones: bool,
    collect_payload: bool,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, Optional[TransmitPayload], torch.Tensor]:
    """Run one latent through MEM_e -> channel -> MEM_d.

    Returns (y_hat, hard_mask_bits (B, C), keep_prob (B, C), payload, tilde_y).
    """
    b, c, h16, w16 = y.shape
    if mask_mode == "policy":
        decision, _params = mem.decide_mask(
            y, temporal, mode="train" if train else "eval", temperature=tau, seed=mask_seed
        )
        hard, keep_prob = decision.hard, decision.keep_prob
        if force_all_ones:
            hard = torch.ones_like(hard)
            keep_prob = torch.ones_like(keep_prob)
    else:
        hard = override_mask_bits(mask_mode, b, c, fixed_channels).to(y.dtype)
        keep_prob = hard.clone()
    tilde = mem.encoder(y)
    sigma2 = cfg.sigma2

    if train:
        z = mem.encoder.apply_mask(tilde, hard)
        m_space = hard.view(b, c, 1, 1)
        counts = hard.detach().sum(dim=1).clamp(min=1.0) * (h16 * w16)
        energy = (z * z).sum(dim=(1, 2, 3)).clamp(min=1e-12)
        gain = torch.sqrt(cfg.power * counts / energy)
        if sigma2 > 0:
            if cfg.kind == "rayleigh":
                hr, hi = torch.randn(2, b, device=y.device)
                hmag = torch.sqrt((hr**2 + hi**2) / 2.0).clamp(min=ch.RAYLEIGH_MIN_GAIN)
                noise_std = math.sqrt(sigma2) / hmag
            else:
                noise_std = torch.full((b,), math.sqrt(sigma2), device=y.device)
            noise = torch.randn_like(z) * noise_std.view(b, 1, 1, 1)
            received = z + noise * m_space / gain.view(b, 1, 1, 1)
        else:
            received = z
        y_hat = mem.decoder(received)
        return y_hat, hard, keep_prob, None, tilde

    mask_obj = Mask(hard[0], frame_index)
    payload = mem.encoder.pack(tilde, mask_obj, cfg.power)
    if payload.symbols.numel() > 0:
        symbols = ch.ChannelSymbols(payload.symbols, frame_index, payload.gain)
        received = ch.transmit(symbols, cfg, noise_seed)
        received_payload = TransmitPayload(received.values, mask_obj, payload.latent_shape, payload.gain)
    else:
        received_payload = payload
    dense = mem.decoder.scatter(received_payload, c)
    y_hat = mem.decoder(dense)
    out_payload = payload if collect_payload else None
    return y_hat, hard, keep_prob, out_payload, tilde


def run_gop(
    frames: list[torch.Tensor],
    models: VideoCodec,
    cfg: ch.ChannelConfig,
    seed: Optional[int] = None,
    train: bool = False,
    tau: float = 1.0,
    mask_mode: str = "policy",
    fixed_channels: int = 32,
    force_all_ones: bool = False,
    feature_propagation: bool = True,
    first_index: int = 0,
    collect_payloads: bool = False,
    compute_nll: bool = False,
) -> list[FrameOutput]:
    """Code one GOP; frames are (B, 3, H, W) tensors in [0, 1].

    In eval mode (train=False) callers should wrap with torch.no_grad().
    Payload emission is only available for batch size 1.
    """
    if not frames:
        raise PipelineError("empty GOP")
    b, _, h, w = frames[0].shape
    if h % 64 or w % 64:
        raise PipelineError(f"frames must be padded to multiples of 64, got {h}x{w}")
    outputs: list[FrameOutput] = []
    enc_state: Optional[EncoderPipelineState] = None
    dec_state: Optional[DecoderPipelineState] = None
    projector = models.projector()

    for t, x in enumerate(frames):
        idx = first_index + t
        try:
            if t == 0:
                y = models.iframe_enc(x)
                y_hat, hard, keep_prob, payload, tilde = _transmit_latent(
                    y, models.mem_i, None, cfg, idx,
                    None if seed is None else derive_seed(seed, idx, 0),
                    None if seed is None else derive_seed(seed, idx, 2),
                    train, tau, mask_mode, fixed_channels, force_all_ones, collect_payloads,
                )
                f_hat = models.iframe_dec(y_hat)
                x_hat = models.refine(f_hat)
                f_enc = models.proj_i(x)
                latent_hw = y.shape[-2:]
                soft = soft_rate_of(keep_prob, latent_hw, (h, w))
                hard_cbr = float(hard.detach().sum(dim=1).mean()) * latent_hw[0] * latent_hw[1] / (3.0 * h * w)
                side = len(serialize_mask(Mask(hard[0], idx))) + GAIN_BYTES
                nll = None
                if compute_nll:
                    params_ar = models.mem_i.entropy(y.detach(), None, mode="autoregressive")
                    params_par = models.mem_i.entropy(y.detach(), None, mode="parallel")
                    nll = gaussian_nll(y.detach(), params_ar) + gaussian_nll(y.detach(), params_par)
                out = FrameOutput(
                    frame_index=idx, is_iframe=True, x_hat=x_hat, latent=y,
                    latent_hat=y_hat, latent_mask=hard, soft_rate=soft, hard_cbr=hard_cbr,
                    enc_feature=f_enc, dec_feature=f_hat, nll_aux=nll,
                    side_channel_bytes=side,
                    payloads=[payload] if payload is not None else [],
                )
            else:
                v = models.flow(enc_state.prev_frame, x)
                y_mv = models.mv_enc(v)
                mv_hat, mv_hard, mv_keep, mv_payload, _ = _transmit_latent(
                    y_mv, models.mem_mv, None, cfg, idx,
                    None if seed is None else derive_seed(seed, idx, 1),
                    None if seed is None else derive_seed(seed, idx, 3),
                    train, tau, mask_mode, fixed_channels, force_all_ones, collect_payloads,
                )
                v_hat = models.mv_dec(mv_hat)

                enc_f = enc_state.prev_feature if feature_propagation else torch.zeros_like(enc_state.prev_feature)
                dec_f = dec_state.prev_feature if feature_propagation else torch.zeros_like(dec_state.prev_feature)
                enc_ctx = models.cond(enc_f, enc_state.prev_frame, v)
                dec_ctx = models.cond(dec_f, dec_state.prev_frame, v_hat)

                y = models.pframe_enc(x, enc_ctx)
                temporal = models.temporal_prior(enc_ctx)
                y_hat, hard, keep_prob, payload, tilde = _transmit_latent(
                    y, models.mem_p, temporal, cfg, idx,
                    None if seed is None else derive_seed(seed, idx, 0),
                    None if seed is None else derive_seed(seed, idx, 2),
                    train, tau, mask_mode, fixed_channels, force_all_ones, collect_payloads,
                )
                f_hat = models.pframe_dec(y_hat, dec_ctx)
                x_hat = models.refine(f_hat)
                f_enc = projector(y, enc_ctx)

                latent_hw = y.shape[-2:]
                mv_hw = y_mv.shape[-2:]
                soft = soft_rate_of(keep_prob, latent_hw, (h, w)) + soft_rate_of(mv_keep, mv_hw, (h, w))
                hard_cbr = (
                    float(hard.detach().sum(dim=1).mean()) * latent_hw[0] * latent_hw[1]
                    + float(mv_hard.detach().sum(dim=1).mean()) * mv_hw[0] * mv_hw[1]
                ) / (3.0 * h * w)
                side = (
                    len(serialize_mask(Mask(hard[0], idx)))
                    + len(serialize_mask(Mask(mv_hard[0], idx)))
                    + 2 * GAIN_BYTES
                )
                nll = None
                if compute_nll:
                    ctx_det = ContextSet(enc_ctx.c1.detach(), enc_ctx.c2.detach(), enc_ctx.c3.detach())
                    t_det = models.temporal_prior(ctx_det)
                    params_ar = models.mem_p.entropy(y.detach(), t_det, mode="autoregressive")
                    params_par = models.mem_p.entropy(y.detach(), t_det, mode="parallel")
                    nll = gaussian_nll(y.detach(), params_ar) + gaussian_nll(y.detach(), params_par)
                    params_mv = models.mem_mv.entropy(y_mv.detach(), None, mode="autoregressive")
                    nll = nll + gaussian_nll(y_mv.detach(), params_mv)
                out = FrameOutput(
                    frame_index=idx, is_iframe=False, x_hat=x_hat, latent=y,
                    latent_hat=y_hat, latent_mask=hard, soft_rate=soft, hard_cbr=hard_cbr,
                    enc_feature=f_enc, dec_feature=f_hat,
                    mv_latent=y_mv, mv_mask=mv_hard, flow=v, flow_hat=v_hat, nll_aux=nll,
                    side_channel_bytes=side,
                    payloads=[p for p in (mv_payload, payload) if p is not None],
                )
        except Exception as e:
            raise PipelineError(f"frame {first_index + t}: {e}") from e

        enc_state = EncoderPipelineState(x, out.enc_feature)
        dec_state = DecoderPipelineState(out.x_hat, out.dec_feature)
        outputs.append(out)
    return outputs


def transmit_gop(
    gop: Gop,
    models: VideoCodec,
    cfg: ch.ChannelConfig,
    seed: int = 0,
    first_index: int = 0,
    mask_mode: str = "policy",
    fixed_channels: int = 32,
    feature_propagation: bool = True,
    collect_payloads: bool = False,
) -> GopResult:
    """Evaluate one GOP end to end, producing reconstructions and statistics."""
    models.eval()
    frames = [g.pixels.unsqueeze(0) for g in gop.frames]
    h, w = gop.frames[0].height, gop.frames[0].width
    with torch.no_grad():
        outs = run_gop(
            frames, models, cfg, seed=seed, train=False, mask_mode=mask_mode,
            fixed_channels=fixed_channels, feature_propagation=feature_propagation,
            first_index=first_index, collect_payloads=collect_payloads,
        )
    recons, stats, payloads = [], [], []
    for g, out in zip(gop.frames, outs):
        rec = Frame(out.x_hat[0].clamp(0.0, 1.0))
        recons.append(rec)
        cbr = frame_cbr(Mask(out.latent_mask[0], out.frame_index), h, w)
        if out.mv_mask is not None:
            cbr += frame_cbr(Mask(out.mv_mask[0], out.frame_index), h, w)
        stats.append(
            FrameStats(
                frame_index=out.frame_index,
                cbr=cbr,
                psnr_db=psnr(g, rec),
                ms_ssim=ms_ssim(g, rec),
                side_channel_bytes=out.side_channel_bytes,
            )
        )
        payloads.append(out.payloads)
    return GopResult(recons, stats, payloads if collect_payloads else None)


def transmit_sequence(
    seq: FrameSequence,
    models: VideoCodec,
    cfg: ch.ChannelConfig,
    gop_n: int,
    seed: int = 0,
    mask_mode: str = "policy",
    fixed_channels: int = 32,
    feature_propagation: bool = True,
    collect_payloads: bool = False,
) -> GopResult:
    """Transmit a whole sequence GOP by GOP, padding frames to multiples of 64
    and computing quality metrics on the unpadded region.

    The bandwidth ratio counts the symbols actually transmitted (for the
    padded frame) against the source pixel count.
    """
    if not seq.frames:
        raise PipelineError("empty sequence")
    h0, w0 = seq.frames[0].height, seq.frames[0].width
    padded = FrameSequence([pad_to_multiple(f)[0] for f in seq.frames])
    hp, wp = padded.frames[0].height, padded.frames[0].width
    cbr_scale = (hp * wp) / (h0 * w0)
    recons: list[Frame] = []
    stats: list[FrameStats] = []
    payloads: list[list[TransmitPayload]] = []
    for g_idx, gop in enumerate(slice_gops(padded, gop_n)):
        res = transmit_gop(
            gop, models, cfg, seed=seed + g_idx, first_index=g_idx * gop_n,
            mask_mode=mask_mode, fixed_channels=fixed_channels,
            feature_propagation=feature_propagation, collect_payloads=collect_payloads,
        )
        for k, (rec, st) in enumerate(zip(res.reconstructions, res.stats)):
            rec_c = crop_back(rec, (h0, w0))
            src = seq.frames[g_idx * gop_n + k]
            recons.append(rec_c)
            stats.append(
                FrameStats(
                    frame_index=st.frame_index,
                    cbr=st.cbr * cbr_scale,
                    psnr_db=psnr(src, rec_c),
                    ms_ssim=ms_ssim(src, rec_c),
                    side_channel_bytes=st.side_channel_bytes,
                )
            )
        if collect_payloads and res.payloads is not None:
            payloads += res.payloads
    return GopResult(recons, stats, payloads if collect_payloads else None)


def encoder_outputs_noise_invariant(
    gop: Gop, models: VideoCodec, cfg: ch.ChannelConfig, seeds: tuple[int, int]
) -> bool:
    """True iff every encoder-side artifact is bitwise identical across the two
    channel seeds (the central asymmetric-context contract)."""

    def encoder_artifacts(seed: int):
        models.eval()
        frames = [g.pixels.unsqueeze(0) for g in gop.frames]
        with torch.no_grad():
            outs = run_gop(frames, models, cfg, seed=seed, train=False)
        arts = []
        for o in outs:
            arts.append(o.latent)
            arts.append(o.enc_feature)
            arts.append(o.latent_mask)
            if o.flow is not None:
                arts.append(o.flow)
            if o.mv_latent is not None:
                arts.append(o.mv_latent)
            if o.mv_mask is not None:
                arts.append(o.mv_mask)
        return arts

    a = encoder_artifacts(seeds[0])
    b = encoder_artifacts(seeds[1])
    return all(x.shape == y.shape and bool(torch.equal(x, y)) for x, y in zip(a, b))


def write_payload_archive(payload_lists: list[list[TransmitPayload]], path) -> None:
    flat = [p for frame in payload_lists for p in frame]
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<HI", ARCHIVE_VERSION, len(flat)))
        for p in flat:
            blob = serialize_mask(p.mask)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<fHHI", p.gain, p.latent_shape[0], p.latent_shape[1], p.symbols.numel()))
            fh.write(p.symbols.detach().to(torch.float32).numpy().tobytes())


def read_payload_archive(path) -> list[TransmitPayload]:
    import numpy as np

    with open(path, "rb") as fh:
        if fh.read(4) != ARCHIVE_MAGIC:
            raise PipelineError("bad payload archive magic")
        version, count = struct.unpack("<HI", fh.read(6))
        if version != ARCHIVE_VERSION:
            raise PipelineError(f"unsupported payload archive version {version}")
        out = []
        for _ in range(count):
            (blob_len,) = struct.unpack("<I", fh.read(4))
            mask = deserialize_mask(fh.read(blob_len))
            gain, lh, lw, n = struct.unpack("<fHHI", fh.read(12))
            symbols = torch.from_numpy(
                np.frombuffer(fh.read(4 * n), dtype=np.float32).copy()
            )
            out.append(TransmitPayload(symbols, mask, (lh, lw), gain))
        return out
