"""Three-stage training: I-frame coding, cascaded P-frame coding with
per-frame weights, and full-GOP fine-tuning, plus the flow and entropy-model
pretraining hooks.

Stage 2 freezes the I-frame transmission path (analysis/synthesis transforms,
Refine and the I-frame entropy module); the single-conv I-frame projector is
trained with the P machinery since it receives no gradient in stage 1. Within
a stage the first `entropy_pretrain_frac` of steps force an all-ones mask
while an auxiliary Gaussian NLL trains the entropy models; afterwards the
gating policy activates with the Gumbel temperature annealed tau_start ->
tau_end.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F

from .channel import ChannelConfig
from .config import RunConfig
from .models import VideoCodec, save_checkpoint
from .motion import endpoint_error
from .pipeline import run_gop
from .videodata import Frame, FrameSequence, random_crop_pair, square_support_mask, synth_moving_squares

FROZEN_IFRAME_MODULES = ("iframe_enc", "iframe_dec", "refine", "mem_i")
STAGE_PREREQ = {"iframe": None, "pframe": ("iframe", "pframe"), "gop_finetune": ("pframe", "gop_finetune")}


class TrainingError(Exception):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass
class LossBreakdown:
    rate: float
    frame_distortion: float
    feature_distortion: float
    total: float


def _f(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def loss_iframe(rate, distortion, lam: float):
    """L1 = lambda * R_t + D_t; rate is the differentiable keep-prob ratio in
    training and the exact mask popcount ratio at eval."""
    total = lam * rate + distortion
    return total, LossBreakdown(_f(rate), _f(distortion), 0.0, _f(total))


def loss_pframe(rate, distortion, feat_distortion, lam: float, w: float):
    """L2 = lambda * R_t + w_t * (D_t + D_ft)."""
    total = lam * rate + w * (distortion + feat_distortion)
    return total, LossBreakdown(_f(rate), _f(distortion), _f(feat_distortion), _f(total))


def loss_gop(per_frame: list[tuple], lam: float, wt: list[float]):
    """L = sum_t (lambda * R_t + w_t * D_t), w_1 = 1 for the I-frame."""
    if not per_frame:
        raise TrainingError("loss_gop needs at least one frame")
    total = None
    for t, (rate, dist) in enumerate(per_frame):
        w = 1.0 if t == 0 else wt[t - 1]
        term = lam * rate + w * dist
        total = term if total is None else total + term
    return total


def tau_schedule(step: int, steps: int, pretrain_frac: float, tau_start: float, tau_end: float) -> float:
    """Anneal the Gumbel temperature linearly over the policy-active window."""
    start = int(round(pretrain_frac * steps))
    if step < start or steps <= start + 1:
        return tau_start
    progress = (step - start) / max(1, steps - 1 - start)
    return tau_start + (tau_end - tau_start) * min(1.0, progress)


def synthetic_dataset(cfg: RunConfig) -> list[FrameSequence]:
    d = cfg.dataset
    return [
        synth_moving_squares(
            d.synthetic_squares,
            d.synthetic_frames,
            tuple(d.synthetic_size),
            tuple(d.synthetic_velocity),
            cfg.seed + 101 * k,
        )
        for k in range(d.synthetic_clips)
    ]


def _crop_window(frames: list[Frame], size: int, seed: int) -> list[Frame]:
    if frames[0].height == size and frames[0].width == size:
        return frames
    return random_crop_pair(frames, size, seed)


IFRAME_STAGE_MODULES = ("iframe_enc", "iframe_dec", "refine", "proj_i", "mem_i")


def _select_trainable(models: VideoCodec, module_names: Optional[tuple[str, ...]]) -> list[torch.nn.Parameter]:
    """Mark exactly `module_names` trainable (None = everything) and return
    their parameters."""
    trainable = []
    for name, module in models.named_children():
        flag = module_names is None or name in module_names
        for p in module.parameters():
            p.requires_grad_(flag)
            if flag:
                trainable.append(p)
    return trainable


def _param_groups(models: VideoCodec, params: list[torch.nn.Parameter], lr: float, policy_mult: float):
    """Split trainable parameters so the gating policies get a faster clock."""
    policy_ids = {
        id(p)
        for mem in (models.mem_i, models.mem_p, models.mem_mv)
        for p in mem.policy.parameters()
    }
    policy = [p for p in params if id(p) in policy_ids]
    rest = [p for p in params if id(p) not in policy_ids]
    groups = [{"params": rest, "lr": lr}]
    if policy:
        groups.append({"params": policy, "lr": lr * policy_mult})
    return groups


def flow_ground_truth(velocity: tuple[int, int], support: torch.Tensor) -> torch.Tensor:
    """Backward flow mapping current-frame coordinates to previous-frame sample
    positions: (-dx, -dy) inside the moving support, zero on the static
    background (warp(prev, v) == cur by construction)."""
    dy, dx = velocity
    h, w = support.shape
    gt = torch.zeros(2, h, w)
    gt[0][support] = -float(dx)
    gt[1][support] = -float(dy)
    return gt


def flow_pretrain(
    models: VideoCodec,
    steps: int,
    size: tuple[int, int] = (64, 64),
    seed: int = 0,
    lr: float = 1e-4,
    batch: int = 2,
) -> list[dict]:
    """Supervised endpoint-error pretraining on synthetic clips with known motion."""
    rng = random.Random(seed)
    velocities = [(0, 0), (0, 1), (1, 0), (0, 2), (2, 0), (-1, 0), (0, -1), (1, 1), (-2, 0), (0, -2)]
    pool = []
    for k, vel in enumerate(velocities * 3):
        s = seed + 977 * k
        seq = synth_moving_squares(2, 2, size, vel, s)
        support = square_support_mask(2, 2, size, vel, s, t=1)
        pool.append((seq.frames[0].pixels, seq.frames[1].pixels, flow_ground_truth(vel, support)))
    opt = torch.optim.Adam(models.flow.parameters(), lr=lr)
    curve = []
    models.flow.train()
    for step in range(steps):
        items = [pool[rng.randrange(len(pool))] for _ in range(batch)]
        x0 = torch.stack([i[0] for i in items])
        x1 = torch.stack([i[1] for i in items])
        gt = torch.stack([i[2] for i in items])
        flow = models.flow(x0, x1)
        loss = endpoint_error(flow, gt)
        if not math.isfinite(_f(loss)):
            raise TrainingDiverged(f"flow pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append({"step": step, "stage": "flow", "total": _f(loss)})
    return curve


def _feature_loss(models: VideoCodec, out, x_t: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "encoder_feature":
        return F.mse_loss(out.dec_feature, out.enc_feature.detach())
    if mode == "pixel_aux":
        return F.mse_loss(models.refine(out.dec_feature), x_t)
    raise TrainingError(f"unknown feature loss mode {mode!r}")


def run_stage(
    cfg: RunConfig,
    data: list[FrameSequence],
    models: VideoCodec,
    out_dir: str | Path,
    prev_stage: Optional[str] = None,
) -> dict:
    """Run one training stage, writing a checkpoint and a loss-curve CSV.

    `prev_stage` is the stage recorded in the checkpoint the models were
    loaded from (None for freshly initialized models).
    """
    tc = cfg.train
    prereq = STAGE_PREREQ[tc.stage]
    if prereq is not None and prev_stage not in prereq:
        raise TrainingError(
            f"stage {tc.stage!r} requires a checkpoint from stage {' or '.join(prereq)!r}, "
            f"got {prev_stage!r}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chan = ChannelConfig(cfg.channel.kind, tc.csnr_db, cfg.channel.power, cfg.channel.seed)
    rng = random.Random(cfg.seed)
    torch.manual_seed(cfg.seed + 7)
    curve: list[dict] = []

    if tc.stage == "pframe" and tc.flow_pretrain_steps > 0:
        curve += flow_pretrain(
            models, tc.flow_pretrain_steps,
            size=(tc.crop_size, tc.crop_size), seed=cfg.seed, lr=tc.lr,
        )

    if tc.stage == "iframe":
        params = _select_trainable(models, IFRAME_STAGE_MODULES)
        frames = [f for seq in data for f in seq.frames]
        if not frames:
            raise TrainingError("no frames available for I-frame training")
        batch_size = tc.batch_iframe
        clip_pool = None
    else:
        if tc.stage == "pframe":
            names = tuple(n for n, _ in models.named_children() if n not in FROZEN_IFRAME_MODULES)
            params = _select_trainable(models, names)
        else:
            params = _select_trainable(models, None)
        clip_pool = []
        for seq in data:
            if len(seq.frames) < tc.clip_frames:
                continue  # shorter than 1 I + 4 P: skipped at training time
            for i in range(0, len(seq.frames) - tc.clip_frames + 1):
                clip_pool.append(seq.frames[i : i + tc.clip_frames])
        if not clip_pool:
            raise TrainingError(
                f"no training clips of length {tc.clip_frames} available"
            )
        batch_size = tc.batch_pframe
        frames = None

    opt = torch.optim.Adam(_param_groups(models, params, tc.lr, tc.policy_lr_multiplier))
    pretrain_steps = int(round(tc.entropy_pretrain_frac * tc.steps))
    models.train()

    for step in range(tc.steps):
        force_ones = step < pretrain_steps
        tau = tau_schedule(step, tc.steps, tc.entropy_pretrain_frac, tc.tau_start, tc.tau_end)

        if tc.stage == "iframe":
            picks = [frames[rng.randrange(len(frames))] for _ in range(batch_size)]
            picks = [_crop_window([f], tc.crop_size, rng.randrange(1 << 30))[0] for f in picks]
            x = torch.stack([f.pixels for f in picks])
            outs = run_gop([x], models, chan, seed=None, train=True, tau=tau,
                           force_all_ones=force_ones, compute_nll=True)
            o = outs[0]
            dist = F.mse_loss(o.x_hat, x)
            total, lb = loss_iframe(o.soft_rate, dist, tc.lam)
            nll = o.nll_aux
            total = total + tc.nll_weight * nll
        else:
            picks = [clip_pool[rng.randrange(len(clip_pool))] for _ in range(batch_size)]
            cropped = [_crop_window(clip, tc.crop_size, rng.randrange(1 << 30)) for clip in picks]
            frames_t = [
                torch.stack([clip[t].pixels for clip in cropped])
                for t in range(tc.clip_frames)
            ]
            outs = run_gop(frames_t, models, chan, seed=None, train=True, tau=tau,
                           force_all_ones=force_ones, compute_nll=True)
            total = None
            nll = None
            lb = LossBreakdown(0.0, 0.0, 0.0, 0.0)
            if tc.stage == "pframe":
                for t, o in enumerate(outs[1:], start=1):
                    dist = F.mse_loss(o.x_hat, frames_t[t])
                    feat = _feature_loss(models, o, frames_t[t], tc.feature_loss)
                    term, part = loss_pframe(o.soft_rate, dist, feat, tc.lam, tc.wt[t - 1])
                    total = term if total is None else total + term
                    nll = o.nll_aux if nll is None else nll + o.nll_aux
                    lb = LossBreakdown(
                        lb.rate + part.rate,
                        lb.frame_distortion + part.frame_distortion,
                        lb.feature_distortion + part.feature_distortion,
                        lb.total + part.total,
                    )
            else:
                per_frame = []
                for t, o in enumerate(outs):
                    dist = F.mse_loss(o.x_hat, frames_t[t])
                    per_frame.append((o.soft_rate, dist))
                total = loss_gop(per_frame, tc.lam, tc.wt)
                nll = sum(o.nll_aux for o in outs)
                lb = LossBreakdown(
                    sum(_f(r) for r, _ in per_frame),
                    sum(_f(d) for _, d in per_frame),
                    0.0,
                    _f(total),
                )
            total = total + tc.nll_weight * nll

        if not math.isfinite(_f(total)):
            raise TrainingDiverged(f"stage {tc.stage} diverged at step {step} (loss={_f(total)})")
        opt.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], max_norm=1.0)
        opt.step()
        curve.append(
            {
                "step": step,
                "stage": tc.stage,
                "total": _f(total),
                "rate": lb.rate,
                "frame_distortion": lb.frame_distortion,
                "feature_distortion": lb.feature_distortion,
                "nll": _f(nll) if nll is not None else float("nan"),
                "tau": tau,
                "policy_active": int(not force_ones),
            }
        )

    models.eval()
    _select_trainable(models, None)
    from .config import config_to_tree

    ckpt_path = out / f"checkpoint_{tc.stage}.pt"
    save_checkpoint(models, config_to_tree(cfg), ckpt_path)
    curve_path = out / f"curve_{tc.stage}.csv"
    _write_curve(curve, curve_path)
    return {
        "checkpoint": str(ckpt_path),
        "curve": str(curve_path),
        "steps": tc.steps,
        "final_loss": curve[-1]["total"] if curve else float("nan"),
        "stage": tc.stage,
    }


def _write_curve(curve: list[dict], path: Path) -> None:
    if not curve:
        path.write_text("")
        return
    keys = sorted({k for row in curve for k in row})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in curve:
            w.writerow(row)
