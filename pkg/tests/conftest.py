import os
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)

from videojscc.config import config_from_tree
from videojscc.models import build_models, load_models, save_checkpoint
from videojscc.training import run_stage, synthetic_dataset

SMOKE_ARCH = {
    "latent_channels": 32,
    "mv_latent_channels": 32,
    "feature_channels": 24,
    "offset_groups": 2,
}


def smoke_tree(out_dir: str) -> dict:
    return {
        "seed": 7,
        "out_dir": out_dir,
        "gop": 4,
        "dataset": {
            "synthetic": True,
            "synthetic_frames": 5,
            "synthetic_size": [64, 64],
            "synthetic_squares": 2,
            "synthetic_velocity": [0, 0],
            "synthetic_clips": 1,
        },
        "channel": {"kind": "awgn", "csnr_db": 300.0, "power": 1.0, "seed": 0},
        "arch": dict(SMOKE_ARCH),
        "train": {
            "stage": "iframe",
            "lambda": 4e-3,
            "wt": [0.5, 1.2, 0.9, 1.2],
            "lr": 4e-4,
            "batch_iframe": 2,
            "batch_pframe": 1,
            "csnr_db": 300.0,
            "steps": 700,
            "crop_size": 64,
            "entropy_pretrain_frac": 0.3,
            "flow_pretrain_steps": 250,
            "nll_weight": 0.05,
        },
    }


def _cache_dir() -> Path | None:
    env = os.environ.get("VIDEOJSCC_TEST_CACHE")
    return Path(env) if env else None


@pytest.fixture(scope="session")
def smoke(tmp_path_factory):
    """Full staged training on one synthetic 5-frame static clip (criterion 9),
    shared by the acceptance gate and the trained-behavior tests."""
    out = tmp_path_factory.mktemp("smoke")
    cfg = config_from_tree(smoke_tree(str(out)))
    data = synthetic_dataset(cfg)
    cache = _cache_dir()
    cached = cache / "smoke_final.pt" if cache else None
    if cached is not None and cached.exists():
        models, _ = load_models(cached)
        import shutil

        for name in ("checkpoint_gop_finetune.pt", "curve_iframe.csv"):
            src = cache / name
            if src.exists():
                shutil.copy(src, out / name)
        return {"models": models, "data": data, "cfg": cfg, "out": out}
    models = build_models(cfg.arch, seed=cfg.seed)
    cfg.train.stage = "iframe"
    cfg.train.steps = 1200
    run_stage(cfg, data, models, out, prev_stage=None)
    cfg.train.stage = "pframe"
    cfg.train.steps = 800
    cfg.train.lr = 5e-4
    run_stage(cfg, data, models, out, prev_stage="iframe")
    cfg.train.stage = "gop_finetune"
    cfg.train.steps = 260
    cfg.train.lr = 1e-4
    run_stage(cfg, data, models, out, prev_stage="pframe")
    if cached is not None:
        cache.mkdir(parents=True, exist_ok=True)
        save_checkpoint(models, {"train": {"stage": "gop_finetune"}}, cached)
        import shutil

        shutil.copy(out / "checkpoint_gop_finetune.pt", cache / "checkpoint_gop_finetune.pt")
        shutil.copy(out / "curve_iframe.csv", cache / "curve_iframe.csv")
    return {"models": models, "data": data, "cfg": cfg, "out": out}


@pytest.fixture(scope="session")
def rate_runs(tmp_path_factory):
    """Two I-frame stage runs differing only in lambda (criterion 10)."""
    results = {}
    cache = _cache_dir()
    for lam in (1e-3, 1e-2):
        out = tmp_path_factory.mktemp(f"rate_{lam:g}")
        tree = smoke_tree(str(out))
        tree["dataset"]["synthetic_velocity"] = [0, 1]
        tree["dataset"]["synthetic_clips"] = 3
        tree["train"]["lambda"] = lam
        tree["train"]["steps"] = 800
        tree["train"]["entropy_pretrain_frac"] = 0.6
        cfg = config_from_tree(tree)
        data = synthetic_dataset(cfg)
        cached = cache / f"rate_{lam:g}.pt" if cache else None
        if cached is not None and cached.exists():
            models, _ = load_models(cached)
        else:
            models = build_models(cfg.arch, seed=cfg.seed)
            run_stage(cfg, data, models, out, prev_stage=None)
            if cached is not None:
                cache.mkdir(parents=True, exist_ok=True)
                save_checkpoint(models, {"train": {"stage": "iframe"}}, cached)
        results[lam] = {"models": models, "data": data}
    return results
