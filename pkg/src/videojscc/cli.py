"""Command-line entry point.

Subcommands: train-iframe, train-pframe, finetune-gop, transmit, eval, sweep,
flops, ablate. Exit codes: 0 success, 2 configuration/schema/precondition
errors, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .channel import ChannelError
from .config import ConfigError, RunConfig, load_config, write_effective_config
from .evalsuite import (
    AblationFlags,
    EvalError,
    SweepSpec,
    evaluate_sequences,
    flops_report,
    frame_trace,
    run_ablation,
    run_sweep,
    write_flops_report,
)
from .mem import MemError
from .metrics import MetricsError, write_stats_csv
from .models import build_models, load_models
from .pipeline import PipelineError, transmit_sequence, write_payload_archive
from .training import TrainingDiverged, TrainingError, run_stage, synthetic_dataset
from .videodata import FrameSequence, VideoDataError, load_sequence, save_png_frame

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

_USER_ERRORS = (
    ConfigError,
    ChannelError,
    VideoDataError,
    TrainingError,
    PipelineError,
    EvalError,
    MemError,
    MetricsError,
    FileNotFoundError,
)


def _load_dataset(cfg: RunConfig) -> list[FrameSequence]:
    d = cfg.dataset
    if d.synthetic:
        return synthetic_dataset(cfg)
    root = Path(d.root or "")
    if not root.exists():
        raise VideoDataError(f"dataset root {root} does not exist")
    if d.layout == "planar_yuv420":
        files = sorted(root.glob("*.yuv"))
        if not files:
            raise VideoDataError(f"no .yuv files under {root}")
        return [load_sequence(f, "planar_yuv420") for f in files]
    if any(root.glob("*.png")):
        return [load_sequence(root, "png_frames")]
    subdirs = sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob("*.png")))
    if not subdirs:
        raise VideoDataError(f"no PNG sequences under {root}")
    return [load_sequence(p, "png_frames") for p in subdirs]


def _models_from_config(cfg: RunConfig, checkpoint: str | None):
    if checkpoint:
        models, meta = load_models(checkpoint)
        return models, meta
    return build_models(cfg.arch, seed=cfg.seed), {}


def _resolve(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def cmd_train(stage: str, args) -> int:
    cfg = _resolve(load_config(args.config), args)
    cfg.train.stage = stage
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, out)
    prev_stage = None
    ckpt = args.checkpoint or cfg.train.init_checkpoint
    if ckpt:
        models, meta = load_models(ckpt)
        prev_stage = meta.get("train", {}).get("stage")
    else:
        models = build_models(cfg.arch, seed=cfg.seed)
    data = _load_dataset(cfg)
    summary = run_stage(cfg, data, models, out, prev_stage=prev_stage)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_transmit(args) -> int:
    cfg = _resolve(load_config(args.config), args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, out)
    if not args.checkpoint:
        raise ConfigError("transmit requires --checkpoint")
    models, _ = load_models(args.checkpoint)
    seq = load_sequence(args.input, args.layout) if args.input else _load_dataset(cfg)[0]
    res = transmit_sequence(
        seq, models, cfg.channel, cfg.gop, seed=cfg.seed,
        collect_payloads=args.archive,
    )
    for i, frame in enumerate(res.reconstructions):
        save_png_frame(frame, out / f"recon_{i:05d}.png")
    write_stats_csv(res.stats, out / "stats.csv")
    if args.archive and res.payloads is not None:
        write_payload_archive(res.payloads, out / "payloads.bin")
    print(f"wrote {len(res.reconstructions)} reconstructions and stats.csv to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(load_config(args.config), args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, out)
    if not args.checkpoint:
        raise ConfigError("eval requires --checkpoint")
    models, _ = load_models(args.checkpoint)
    sequences = _load_dataset(cfg)
    summary = evaluate_sequences(sequences, models, cfg.channel, cfg.gop, cfg.seed)
    trace = frame_trace(sequences[0], models, cfg.channel, cfg.gop, cfg.seed, out_dir=out)
    p_idx = [i for i in trace["frame_index"] if i not in trace["iframe_positions"]]
    i_idx = trace["iframe_positions"]
    summary["iframe_mean_cbr"] = sum(trace["cbr"][i] for i in i_idx) / max(1, len(i_idx))
    summary["pframe_mean_cbr"] = (
        sum(trace["cbr"][i] for i in p_idx) / len(p_idx) if p_idx else float("nan")
    )
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve(load_config(args.config), args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, out)
    values = [float(v) for v in args.values.split(",")] if args.values else list(cfg.lambda_values)
    spec = SweepSpec(axis=args.axis, values=values, repeats=args.repeats)
    sequences = _load_dataset(cfg)

    checkpoint_map = {}
    if args.checkpoints:
        for pair in args.checkpoints.split(","):
            key, _, path = pair.partition("=")
            checkpoint_map[float(key)] = path

    def models_for_point(value):
        if checkpoint_map:
            path = checkpoint_map.get(float(value))
            if path is None or not Path(path).exists():
                return None
            return load_models(path)[0]
        if args.checkpoint and Path(args.checkpoint).exists():
            return load_models(args.checkpoint)[0]
        return None

    rows = run_sweep(spec, sequences, cfg.channel, cfg.gop, models_for_point, cfg.seed, out_dir=out)
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _resolve(load_config(args.config), args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models, _ = _models_from_config(cfg, args.checkpoint)
    shape = tuple(int(v) for v in args.input_shape.split(","))
    rows = flops_report(models, shape)
    write_flops_report(rows, out / "flops.csv")
    width = max(len(r["module"]) for r in rows)
    print(f"{'module'.ljust(width)}  {'MACs':>15}  {'FLOPs':>15}  {'params':>12}")
    for r in rows:
        print(f"{r['module'].ljust(width)}  {r['macs']:>15,}  {r['flops']:>15,}  {r['params']:>12,}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve(load_config(args.config), args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, out)
    variants = {}
    for spec_str in args.variant:
        name, _, rest = spec_str.partition("=")
        path, *flag_strs = rest.split(":")
        flags = AblationFlags(
            mem_enabled="no_mem" not in flag_strs,
            feature_propagation="no_fp" not in flag_strs,
            feature_loss="no_frloss" not in flag_strs,
        )
        variants[name] = (load_models(path)[0], flags)
    if "full" not in variants:
        raise ConfigError("ablate requires a variant named 'full' (e.g. --variant full=ckpt.pt)")
    sequences = _load_dataset(cfg)
    rows = run_ablation(variants, sequences, cfg.channel, cfg.gop, cfg.seed)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="videojscc")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--out", default=None, help="override config output directory")
        sp.add_argument("--checkpoint", default=None, help="checkpoint to start from")

    for stage, name in (("iframe", "train-iframe"), ("pframe", "train-pframe"), ("gop_finetune", "finetune-gop")):
        sp = sub.add_parser(name, help=f"run the {stage} training stage")
        common(sp)
        sp.set_defaults(func=lambda a, s=stage: cmd_train(s, a))

    sp = sub.add_parser("transmit", help="transmit a sequence and emit reconstructions + stats")
    common(sp)
    sp.add_argument("--input", default=None, help="sequence directory (default: config dataset)")
    sp.add_argument("--layout", default="png_frames", choices=["png_frames", "planar_yuv420"])
    sp.add_argument("--archive", action="store_true", help="also write the payload archive")
    sp.set_defaults(func=cmd_transmit)

    sp = sub.add_parser("eval", help="summary metrics + per-frame trace")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="R-D sweep over lambda/csnr/gop")
    common(sp)
    sp.add_argument("--axis", default="lambda", choices=["lambda", "csnr", "gop"])
    sp.add_argument("--values", default=None, help="comma-separated sweep values")
    sp.add_argument("--repeats", type=int, default=1)
    sp.add_argument("--checkpoints", default=None, help="value=path,value=path checkpoint map")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("flops", help="analytic FLOPs/parameter report")
    common(sp)
    sp.add_argument("--input-shape", default="1,3,256,256")
    sp.set_defaults(func=cmd_flops)

    sp = sub.add_parser("ablate", help="rate-matched ablation comparison")
    common(sp)
    sp.add_argument(
        "--variant", action="append", default=[],
        help="name=checkpoint[:no_mem][:no_fp][:no_frloss], repeatable; 'full' required",
    )
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except _USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
