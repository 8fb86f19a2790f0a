"""Model container binding every trainable component, the pinned architecture
table, and the single-file versioned checkpoint container.

Checkpoint entries: iframe, pframe, motion.flow, motion.mv_codec, context_gen,
mem.iframe, mem.pframe, mem.mv.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .context import ContextGenerator, TemporalPrior
from .iframe import IFrameDecoder, IFrameEncoder, ProjI, Refine
from .mem import MEM
from .motion import FlowEstimator, MVDecoder, MVEncoder
from .pframe import PFrameDecoder, PFrameEncoder, ProjP

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class ArchConfig:
    """Pinned desk-scale architecture table (see docs/architecture.md)."""

    latent_channels: int = 64
    mv_latent_channels: int = 64
    feature_channels: int = 48
    offset_groups: int = 4


class VideoCodec(nn.Module):
    """All networks of the transmission system, grouped by checkpoint entry."""

    def __init__(self, arch: Optional[ArchConfig] = None, linear_mem: bool = False):
        super().__init__()
        self.arch = arch or ArchConfig()
        a = self.arch
        self.iframe_enc = IFrameEncoder(a.latent_channels)
        self.iframe_dec = IFrameDecoder(a.latent_channels, a.feature_channels)
        self.refine = Refine(a.feature_channels)
        self.proj_i = ProjI(a.feature_channels)
        self.pframe_enc = PFrameEncoder(a.latent_channels, a.feature_channels)
        self.pframe_dec = PFrameDecoder(a.latent_channels, a.feature_channels)
        self.proj_p = ProjP(a.latent_channels, a.feature_channels)
        self.flow = FlowEstimator()
        self.mv_enc = MVEncoder(a.mv_latent_channels)
        self.mv_dec = MVDecoder(a.mv_latent_channels)
        self.cond = ContextGenerator(a.feature_channels, a.offset_groups)
        self.temporal_prior = TemporalPrior(a.feature_channels, a.latent_channels)
        self.mem_i = MEM(a.latent_channels, with_temporal=False, linear_stacks=linear_mem)
        self.mem_p = MEM(a.latent_channels, with_temporal=True, linear_stacks=linear_mem)
        self.mem_mv = MEM(a.mv_latent_channels, with_temporal=False, linear_stacks=linear_mem)
        # Test hook: route the projector through the decoder's parameters so
        # the two sides become exactly symmetric under a noiseless channel.
        self.tie_proj_p = False

    def projector(self) -> nn.Module:
        return self.pframe_dec if self.tie_proj_p else self.proj_p

    def entry_groups(self) -> dict[str, nn.Module | dict[str, nn.Module]]:
        return {
            "iframe": {
                "enc": self.iframe_enc,
                "dec": self.iframe_dec,
                "refine": self.refine,
                "proj_i": self.proj_i,
            },
            "pframe": {
                "enc": self.pframe_enc,
                "dec": self.pframe_dec,
                "proj_p": self.proj_p,
            },
            "motion.flow": self.flow,
            "motion.mv_codec": {"enc": self.mv_enc, "dec": self.mv_dec},
            "context_gen": {"cond": self.cond, "temporal_prior": self.temporal_prior},
            "mem.iframe": self.mem_i,
            "mem.pframe": self.mem_p,
            "mem.mv": self.mem_mv,
        }

    def entry_state_dicts(self) -> dict[str, dict]:
        out = {}
        for name, group in self.entry_groups().items():
            if isinstance(group, dict):
                out[name] = {k: m.state_dict() for k, m in group.items()}
            else:
                out[name] = group.state_dict()
        return out

    def load_entries(self, entries: dict[str, dict], names: Optional[list[str]] = None) -> None:
        groups = self.entry_groups()
        for name, blob in entries.items():
            if names is not None and name not in names:
                continue
            if name not in groups:
                raise KeyError(f"unknown checkpoint entry {name!r}")
            group = groups[name]
            if isinstance(group, dict):
                for k, m in group.items():
                    m.load_state_dict(blob[k])
            else:
                group.load_state_dict(blob)

    def parameters_for(self, entry_names: list[str]):
        groups = self.entry_groups()
        for name in entry_names:
            for m in _group_modules(groups[name]):
                yield from m.parameters()


def _group_modules(group):
    return list(group.values()) if isinstance(group, dict) else [group]


def build_models(arch: Optional[ArchConfig] = None, seed: int = 0, linear_mem: bool = False) -> VideoCodec:
    torch.manual_seed(seed)
    return VideoCodec(arch, linear_mem=linear_mem)


def save_checkpoint(models: VideoCodec, config: dict, path: str | Path) -> None:
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "arch": asdict(models.arch),
        "config": config,
        "entries": models.entry_state_dicts(),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(
            f"checkpoint schema {blob.get('schema_version')} unsupported "
            f"(expected {CHECKPOINT_SCHEMA_VERSION})"
        )
    return blob


def load_models(path: str | Path, linear_mem: bool = False) -> tuple[VideoCodec, dict]:
    blob = load_checkpoint(path)
    arch = ArchConfig(**blob["arch"])
    models = VideoCodec(arch, linear_mem=linear_mem)
    models.load_entries(blob["entries"])
    return models, blob.get("config", {})
