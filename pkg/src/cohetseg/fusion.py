"""Hetero-phase network: per-phase stems, statistical fusion, shared trunk.

The first two backbone stages are replicated once per contrast phase; the
last three are shared. Any nonempty subset of a study's phases forms a
view: each phase runs through its own stem, the stem feature maps are
fused position-wise into (mean || variance), and the widened trunk
finishes the prediction. Stage-1/2 deep-supervision predictions are
averaged across phases in probability space; the logit accumulator handed
to the trunk is the average of the per-phase accumulators (the mean
commutes with the progressive sum, so the two stay consistent).
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import (
    BackboneConfig,
    StageOutputs,
    _as_image_batch,
    _load_payload,
    _make_stage,
    save_checkpoint,
)
from .phases import PHASES, canonical_phases
from .phases import view_combinations as enumerate_views

__all__ = [
    "CoHeteroNet",
    "enumerate_views",
    "fuse_features",
    "fuse_intermediate_predictions",
    "hetero_forward",
    "load_cohetero_checkpoint",
    "save_cohetero_checkpoint",
]

N_STEM_STAGES = 2


def fuse_features(stem_activations: dict[str, torch.Tensor]) -> torch.Tensor:
    """Concatenate per-position mean and population variance across phases.

    With a single phase the variance half is exactly zero, so a widened
    layer whose variance-input weights are zero sees the single-phase
    features unchanged.
    """
    if not stem_activations:
        raise ValueError("fuse_features needs at least one phase")
    order = canonical_phases(stem_activations.keys())
    maps = [stem_activations[p] for p in order]
    shapes = {tuple(m.shape) for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"stem feature shapes disagree: {sorted(shapes)}")
    stack = torch.stack(maps)
    mean = stack.mean(dim=0)
    var = stack.var(dim=0, unbiased=False)
    return torch.cat([mean, var], dim=1)


def fuse_intermediate_predictions(prob_maps: list[torch.Tensor]) -> torch.Tensor:
    """Average probability maps across phases; stays on the simplex."""
    if not prob_maps:
        raise ValueError("need at least one probability map")
    if len(prob_maps) == 1:
        return prob_maps[0]
    return torch.stack(prob_maps).mean(dim=0)


class CoHeteroNet(nn.Module):
    """Four phase stems (stages 1-2 plus their heads) and a shared trunk.

    The trunk's first convolution takes twice the stage-2 width because
    fused features carry mean and variance channels.
    """

    def __init__(self, config: Optional[BackboneConfig] = None):
        super().__init__()
        self.config = config if config is not None else BackboneConfig()
        self.config.validate()
        cfg = self.config
        self.stems = nn.ModuleDict()
        self.stem_heads = nn.ModuleDict()
        for phase in PHASES:
            self.stems[phase] = nn.ModuleList(
                _make_stage(cfg, i) for i in range(N_STEM_STAGES))
            self.stem_heads[phase] = nn.ModuleList(
                nn.Conv2d(cfg.channels[i], cfg.n_classes, 1) for i in range(N_STEM_STAGES))
        self.trunk = nn.ModuleList()
        for i in range(N_STEM_STAGES, len(cfg.channels)):
            in_ch = 2 * cfg.channels[i - 1] if i == N_STEM_STAGES else None
            self.trunk.append(_make_stage(cfg, i, in_channels=in_ch))
        self.trunk_heads = nn.ModuleList(
            nn.Conv2d(cfg.channels[i], cfg.n_classes, 1)
            for i in range(N_STEM_STAGES, len(cfg.channels)))

    def forward(self, slices: dict[str, torch.Tensor], combo=None):
        if combo is None:
            combo = canonical_phases(slices.keys())
        return hetero_forward(self, slices, combo)


def _upsample_to(a: torch.Tensor, size) -> torch.Tensor:
    if a.shape[-2:] != size:
        a = F.interpolate(a, size=size, mode="bilinear", align_corners=False)
    return a


def hetero_forward(net: CoHeteroNet, slices: dict[str, torch.Tensor], combo) -> StageOutputs:
    """Predict from one phase subset.

    The returned stage-1/2 probability maps are phase averages (for a
    singleton view they equal the softmax of the accumulator, as in the
    plain backbone); stages 3-5 are softmaxes of the running accumulator.
    """
    combo = canonical_phases(combo)
    missing = [p for p in combo if p not in slices]
    if missing:
        raise ValueError(f"view {combo} requests phases not in study: {missing}")
    cfg = net.config
    xs = {p: _as_image_batch(slices[p], cfg.in_channels) for p in combo}
    shapes = {tuple(x.shape) for x in xs.values()}
    if len(shapes) != 1:
        raise ValueError(f"phase slice shapes disagree: {sorted(shapes)}")
    dtype = next(net.parameters()).dtype
    size = next(iter(xs.values())).shape[-2:]

    stem_feats: dict[str, torch.Tensor] = {}
    side_by_stage: list[list[torch.Tensor]] = [[] for _ in range(N_STEM_STAGES)]
    acc_by_stage: list[list[torch.Tensor]] = [[] for _ in range(N_STEM_STAGES)]
    prob_by_stage: list[list[torch.Tensor]] = [[] for _ in range(N_STEM_STAGES)]
    for p in combo:
        f = xs[p].to(dtype)
        acc = None
        for i in range(N_STEM_STAGES):
            f = net.stems[p][i](f)
            a = _upsample_to(net.stem_heads[p][i](f), size)
            acc = a if acc is None else acc + a
            side_by_stage[i].append(a)
            acc_by_stage[i].append(acc)
            prob_by_stage[i].append(torch.softmax(acc, dim=1))
        stem_feats[p] = f

    logits = [fuse_intermediate_predictions(side_by_stage[i]) for i in range(N_STEM_STAGES)]
    probs = [fuse_intermediate_predictions(prob_by_stage[i]) for i in range(N_STEM_STAGES)]
    accum = [fuse_intermediate_predictions(acc_by_stage[i]) for i in range(N_STEM_STAGES)]
    acc = accum[-1]

    f = fuse_features(stem_feats)
    for stage, head in zip(net.trunk, net.trunk_heads):
        f = stage(f)
        a = _upsample_to(head(f), size)
        acc = acc + a
        logits.append(a)
        accum.append(acc)
        probs.append(torch.softmax(acc, dim=1))
    return StageOutputs(logits, accum, probs)


def save_cohetero_checkpoint(path, net: CoHeteroNet, step: int = 0,
                             extra: Optional[dict] = None) -> None:
    save_checkpoint(path, net, step=step, kind="cohetero", extra=extra)


def load_cohetero_checkpoint(path) -> tuple[CoHeteroNet, int]:
    payload = _load_payload(path, "cohetero")
    net = CoHeteroNet(BackboneConfig(**payload["config"]))
    net.load_state_dict(payload["state"])
    return net, payload["step"]
