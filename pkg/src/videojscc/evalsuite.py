"""Experiment drivers: sweeps over lambda/CSNR/GOP, per-frame trace curves,
analytic FLOPs/parameter reporting and rate-matched ablations.

All drivers are pure functions of (checkpoints, dataset, seeds); re-running
reproduces CSV outputs byte for byte.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import torch
import torch.nn as nn

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .channel import ChannelConfig
from .layers import GDN
from .metrics import gop_cbr
from .models import VideoCodec
from .pipeline import transmit_sequence
from .videodata import FrameSequence


class EvalError(Exception):
    pass


@dataclass
class SweepSpec:
    axis: str  # lambda | csnr | gop
    values: list
    repeats: int = 1
    dataset: Optional[str] = None

    def __post_init__(self):
        if self.axis not in ("lambda", "csnr", "gop"):
            raise EvalError(f"unknown sweep axis {self.axis!r}")
        if not self.values:
            raise EvalError("sweep needs at least one value")
        if self.repeats < 1:
            raise EvalError("repeats must be >= 1")


@dataclass
class AblationFlags:
    mem_enabled: bool = True
    feature_propagation: bool = True
    feature_loss: bool = True
    fixed_channels: int = 32  # keep-set when the entropy module is disabled


def evaluate_sequences(
    sequences: list[FrameSequence],
    models: VideoCodec,
    channel: ChannelConfig,
    gop_n: int,
    seed: int,
    mask_mode: str = "policy",
    fixed_channels: int = 32,
    feature_propagation: bool = True,
) -> dict:
    """Mean (R, PSNR, MS-SSIM) over all frames of all sequences."""
    cbrs, psnrs, ssims = [], [], []
    for s_idx, seq in enumerate(sequences):
        res = transmit_sequence(
            seq, models, channel, gop_n, seed=seed + 1009 * s_idx,
            mask_mode=mask_mode, fixed_channels=fixed_channels,
            feature_propagation=feature_propagation,
        )
        cbrs.append(gop_cbr(res.stats))
        psnrs += [st.psnr_db for st in res.stats]
        ssims += [st.ms_ssim for st in res.stats]
    n = max(1, len(cbrs))
    return {
        "cbr": sum(cbrs) / n,
        "psnr_db": sum(psnrs) / max(1, len(psnrs)),
        "ms_ssim": sum(ssims) / max(1, len(ssims)),
    }


def run_sweep(
    spec: SweepSpec,
    sequences: list[FrameSequence],
    channel: ChannelConfig,
    gop_n: int,
    models_for_point: Callable[[object], Optional[VideoCodec]],
    seed: int = 0,
    out_dir: Optional[str | Path] = None,
) -> list[dict]:
    """One row per sweep point with mean and std over `repeats` seeds.

    `models_for_point` returns the models for a point, or None if its
    checkpoint is unavailable (the point is listed as skipped, not fatal).
    """
    rows = []
    for value in spec.values:
        models = models_for_point(value)
        if models is None:
            rows.append({"axis": spec.axis, "value": value, "skipped": 1})
            continue
        chan = channel
        n_gop = gop_n
        if spec.axis == "csnr":
            chan = ChannelConfig(channel.kind, float(value), channel.power, channel.seed)
        elif spec.axis == "gop":
            n_gop = int(value)
        per_seed = [
            evaluate_sequences(sequences, models, chan, n_gop, seed=seed + r)
            for r in range(spec.repeats)
        ]
        row = {"axis": spec.axis, "value": value, "skipped": 0, "repeats": spec.repeats}
        for key in ("cbr", "psnr_db", "ms_ssim"):
            vals = [p[key] for p in per_seed]
            mean = sum(vals) / len(vals)
            std = math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals)) if len(vals) > 1 else 0.0
            row[f"{key}_mean"] = mean
            row[f"{key}_std"] = std
        rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(rows, out / f"sweep_{spec.axis}.csv")
        _plot_sweep(rows, spec.axis, out)
    return rows


def _write_rows(rows: list[dict], path: Path) -> None:
    keys = sorted({k for r in rows for k in r})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _plot_sweep(rows: list[dict], axis: str, out: Path) -> None:
    live = [r for r in rows if not r.get("skipped")]
    if not live:
        return
    for metric in ("psnr_db", "ms_ssim"):
        fig, ax = plt.subplots(figsize=(5, 4))
        xs = [r["cbr_mean"] if axis == "lambda" else r["value"] for r in live]
        ys = [r[f"{metric}_mean"] for r in live]
        errs = [r[f"{metric}_std"] for r in live]
        ax.errorbar(xs, ys, yerr=errs, marker="o")
        ax.set_xlabel("bandwidth ratio" if axis == "lambda" else axis)
        ax.set_ylabel(metric)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / f"sweep_{axis}_{metric}.png", dpi=120)
        plt.close(fig)


def frame_trace(
    sequence: FrameSequence,
    models: VideoCodec,
    channel: ChannelConfig,
    gop_n: int,
    seed: int = 0,
    out_dir: Optional[str | Path] = None,
) -> dict:
    """Per-frame CBR / PSNR / MS-SSIM arrays with I-frame positions marked."""
    res = transmit_sequence(sequence, models, channel, gop_n, seed=seed)
    cbr = [st.cbr for st in res.stats]
    psnr_db = [st.psnr_db for st in res.stats]
    ms = [st.ms_ssim for st in res.stats]
    iframe_positions = list(range(0, len(cbr), gop_n))
    trace = {
        "frame_index": list(range(len(cbr))),
        "cbr": cbr,
        "psnr_db": psnr_db,
        "ms_ssim": ms,
        "iframe_positions": iframe_positions,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = [
            {
                "frame_index": i,
                "cbr": cbr[i],
                "psnr_db": psnr_db[i],
                "ms_ssim": ms[i],
                "is_iframe": int(i in iframe_positions),
            }
            for i in range(len(cbr))
        ]
        _write_rows(rows, out / "frame_trace.csv")
        fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
        axes[0].plot(trace["frame_index"], cbr, marker=".")
        axes[0].set_ylabel("CBR")
        axes[1].plot(trace["frame_index"], psnr_db, marker=".", color="tab:orange")
        axes[1].set_ylabel("PSNR (dB)")
        axes[1].set_xlabel("frame")
        for ax in axes:
            for p in iframe_positions:
                ax.axvline(p, color="gray", alpha=0.4, linestyle="--")
            ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / "frame_trace.png", dpi=120)
        plt.close(fig)
    return trace


def conv_macs(c_in: int, c_out: int, kernel: int, h_out: int, w_out: int, groups: int = 1) -> int:
    """Multiply-accumulates of one convolution at the given output size."""
    return (c_in // groups) * c_out * kernel * kernel * h_out * w_out


@dataclass
class LayerCount:
    name: str
    kind: str
    macs: int
    params: int


def count_module(module: nn.Module, inputs: tuple) -> list[LayerCount]:
    """Analytic MAC/parameter counts for every counted layer in one forward.

    Convolutions (incl. depthwise), linear layers and GDN normalization pools
    are counted; element-wise operations are not. 1 MAC = 2 FLOPs.
    """
    records: list[LayerCount] = []
    hooks = []

    def conv_hook(name):
        def fn(mod, inp, out):
            h_out, w_out = out.shape[-2:]
            macs = conv_macs(
                mod.in_channels, mod.out_channels, mod.kernel_size[0], h_out, w_out, mod.groups
            )
            records.append(LayerCount(name, "conv", macs, sum(p.numel() for p in mod.parameters())))
        return fn

    def linear_hook(name):
        def fn(mod, inp, out):
            batch = out.numel() // out.shape[-1]
            macs = mod.in_features * mod.out_features * batch
            records.append(LayerCount(name, "linear", macs, sum(p.numel() for p in mod.parameters())))
        return fn

    def gdn_hook(name):
        def fn(mod, inp, out):
            c = inp[0].shape[1]
            h, w = inp[0].shape[-2:]
            records.append(
                LayerCount(name, "gdn", c * c * h * w, sum(p.numel() for p in mod.parameters()))
            )
        return fn

    for name, mod in module.named_modules():
        label = name or module.__class__.__name__
        if isinstance(mod, nn.Conv2d):
            hooks.append(mod.register_forward_hook(conv_hook(label)))
        elif isinstance(mod, nn.Linear):
            hooks.append(mod.register_forward_hook(linear_hook(label)))
        elif isinstance(mod, GDN):
            hooks.append(mod.register_forward_hook(gdn_hook(label)))
    try:
        with torch.no_grad():
            module(*inputs)
    finally:
        for h in hooks:
            h.remove()
    return records


def flops_report(models: VideoCodec, input_shape: tuple[int, int, int, int] = (1, 3, 256, 256)) -> list[dict]:
    """Analytic per-network MAC/FLOP/parameter table at the given frame shape."""
    from .context import ContextSet

    b, _, h, w = input_shape
    a = models.arch
    x = torch.zeros(b, 3, h, w)
    y = torch.zeros(b, a.latent_channels, h // 16, w // 16)
    y_mv = torch.zeros(b, a.mv_latent_channels, h // 16, w // 16)
    f = torch.zeros(b, a.feature_channels, h, w)
    v = torch.zeros(b, 2, h, w)
    ctx = ContextSet(
        torch.zeros(b, a.feature_channels, h, w),
        torch.zeros(b, 2 * a.feature_channels, h // 2, w // 2),
        torch.zeros(b, 4 * a.feature_channels, h // 4, w // 4),
    )
    temporal = torch.zeros(b, a.latent_channels, h // 16, w // 16)
    mask_ones = torch.ones(b, a.latent_channels)

    targets = [
        ("iframe_enc", models.iframe_enc, (x,)),
        ("iframe_dec", models.iframe_dec, (y,)),
        ("refine", models.refine, (f,)),
        ("proj_i", models.proj_i, (x,)),
        ("flow", models.flow, (x, x)),
        ("mv_enc", models.mv_enc, (v,)),
        ("mv_dec", models.mv_dec, (y_mv,)),
        ("cond", models.cond, (f, x, v)),
        ("temporal_prior", models.temporal_prior, (ctx,)),
        ("pframe_enc", models.pframe_enc, (x, ctx)),
        ("pframe_dec", models.pframe_dec, (y, ctx)),
        ("proj_p", models.proj_p, (y, ctx)),
        ("mem_i.entropy", models.mem_i.entropy, (y, None, "autoregressive")),
        ("mem_i.encoder", models.mem_i.encoder, (y,)),
        ("mem_i.decoder", models.mem_i.decoder, (models.mem_i.encoder.apply_mask(y, mask_ones),)),
        ("mem_p.entropy", models.mem_p.entropy, (y, temporal, "autoregressive")),
        ("mem_p.encoder", models.mem_p.encoder, (y,)),
        ("mem_p.decoder", models.mem_p.decoder, (y,)),
        ("mem_mv.entropy", models.mem_mv.entropy, (y_mv, None, "autoregressive")),
        ("mem_mv.encoder", models.mem_mv.encoder, (y_mv,)),
        ("mem_mv.decoder", models.mem_mv.decoder, (y_mv,)),
        ("mem_i.policy", models.mem_i.policy, (torch.zeros(b, a.latent_channels, 3),)),
        ("mem_p.policy", models.mem_p.policy, (torch.zeros(b, a.latent_channels, 3),)),
        ("mem_mv.policy", models.mem_mv.policy, (torch.zeros(b, a.mv_latent_channels, 3),)),
    ]
    rows = []
    for name, module, inputs in targets:
        layers = count_module(module, inputs)
        macs = sum(r.macs for r in layers)
        params = sum(p.numel() for p in module.parameters())
        rows.append({"module": name, "macs": macs, "flops": 2 * macs, "params": params})
    total = {
        "module": "total",
        "macs": sum(r["macs"] for r in rows),
        "flops": sum(r["flops"] for r in rows),
        "params": sum(p.numel() for p in models.parameters()),
    }
    rows.append(total)
    return rows


def write_flops_report(rows: list[dict], path: str | Path) -> None:
    _write_rows(rows, Path(path))


def run_ablation(
    variants: dict[str, tuple[VideoCodec, AblationFlags]],
    sequences: list[FrameSequence],
    channel: ChannelConfig,
    gop_n: int,
    seed: int = 0,
    rate_tolerance: float = 0.05,
) -> list[dict]:
    """PSNR deltas of each variant against the 'full' configuration at matched
    bandwidth (within `rate_tolerance` relative CBR); unmatched variants get no
    delta, only a flag."""
    if "full" not in variants:
        raise EvalError("ablation needs a 'full' reference variant")
    results = {}
    for name, (models, flags) in variants.items():
        results[name] = evaluate_sequences(
            sequences, models, channel, gop_n, seed,
            mask_mode="policy" if flags.mem_enabled else "first_k",
            fixed_channels=flags.fixed_channels,
            feature_propagation=flags.feature_propagation,
        )
    ref = results["full"]
    rows = []
    for name, res in results.items():
        rate_match = abs(res["cbr"] - ref["cbr"]) <= rate_tolerance * max(ref["cbr"], 1e-12)
        row = {
            "variant": name,
            "cbr": res["cbr"],
            "psnr_db": res["psnr_db"],
            "ms_ssim": res["ms_ssim"],
            "rate_matched": int(rate_match),
            "psnr_delta_pct": (
                100.0 * (res["psnr_db"] - ref["psnr_db"]) / ref["psnr_db"] if rate_match else None
            ),
        }
        rows.append(row)
    return rows
