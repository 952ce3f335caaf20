"""Deeply supervised five-stage segmentation backbone.

Every stage owns a 1x1 scoring head. Stage predictions are progressive:
each head's score map is added to a running logit accumulator and the
per-stage probability map is the softmax of that accumulator, so later
stages refine earlier ones instead of being fused after the fact. The
supervised loss weights stage m by m/5, pushing most of the pressure
onto the deepest prediction while still training the early heads.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .volume_io import IGNORE_LABEL

N_STAGES = 5


@dataclass
class BackboneConfig:
    channels: tuple[int, ...] = (16, 32, 64, 64, 64)
    downsample: tuple[int, ...] = (1, 2, 2, 2, 2)  # pooling factor entering each stage
    blocks_per_stage: int = 2
    in_channels: int = 1
    n_classes: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.downsample = tuple(int(d) for d in self.downsample)

    def validate(self) -> None:
        if len(self.channels) != N_STAGES:
            raise ConfigError(f"need exactly {N_STAGES} stage channel counts, got {len(self.channels)}")
        if len(self.downsample) != N_STAGES:
            raise ConfigError(f"need exactly {N_STAGES} downsample factors, got {len(self.downsample)}")
        if any(c <= 0 for c in self.channels) or any(d <= 0 for d in self.downsample):
            raise ConfigError("stage channels and downsample factors must be positive")
        if self.blocks_per_stage <= 0 or self.in_channels <= 0 or self.n_classes < 2:
            raise ConfigError("bad blocks_per_stage / in_channels / n_classes")


def _make_stage(cfg: BackboneConfig, idx: int, in_channels: Optional[int] = None) -> nn.Sequential:
    if in_channels is None:
        in_channels = cfg.in_channels if idx == 0 else cfg.channels[idx - 1]
    layers: list[nn.Module] = []
    if cfg.downsample[idx] > 1:
        layers.append(nn.MaxPool2d(cfg.downsample[idx]))
    for b in range(cfg.blocks_per_stage):
        layers.append(nn.Conv2d(in_channels if b == 0 else cfg.channels[idx],
                                cfg.channels[idx], 3, padding=1))
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class PhnnNet(nn.Module):
    """Five conv stages with per-stage 1x1 scoring heads."""

    def __init__(self, config: Optional[BackboneConfig] = None):
        super().__init__()
        self.config = config if config is not None else BackboneConfig()
        self.config.validate()
        self.stages = nn.ModuleList(_make_stage(self.config, i) for i in range(N_STAGES))
        self.heads = nn.ModuleList(nn.Conv2d(c, self.config.n_classes, 1)
                                   for c in self.config.channels)

    def forward(self, image):
        return phnn_forward(self, image)


@dataclass
class StageOutputs:
    """Per-stage score maps and progressive predictions at input resolution."""

    logits: list[torch.Tensor]  # 1x1-head score maps, upsampled
    accum: list[torch.Tensor]   # running logit accumulator per stage
    probs: list[torch.Tensor]   # softmax of each accumulator

    @property
    def final(self) -> torch.Tensor:
        return self.probs[-1]


def _as_image_batch(image, in_channels: int) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image)) if not torch.is_tensor(image) else image
    if not x.is_floating_point():
        x = x.float()
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:  # (C, H, W) single slice
        x = x[None]
    if x.ndim != 4 or x.shape[1] != in_channels:
        raise ValueError(f"expected (N, {in_channels}, H, W) input, got shape {tuple(x.shape)}")
    return x


def _as_label_batch(y) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(y)) if not torch.is_tensor(y) else y
    if t.ndim == 2:
        t = t[None]
    if t.ndim != 3:
        raise ValueError(f"expected (N, H, W) labels, got shape {tuple(t.shape)}")
    return t.long()


def progressive_outputs(side_logits: Sequence[torch.Tensor]) -> StageOutputs:
    """Turn per-stage score maps into accumulated logits and probabilities."""
    accum: list[torch.Tensor] = []
    probs: list[torch.Tensor] = []
    acc: Optional[torch.Tensor] = None
    for a in side_logits:
        acc = a if acc is None else acc + a
        accum.append(acc)
        probs.append(torch.softmax(acc, dim=1))
    return StageOutputs(list(side_logits), accum, probs)


def phnn_forward(net: PhnnNet, image) -> StageOutputs:
    """Run the backbone and build the five progressive predictions."""
    x = _as_image_batch(image, net.config.in_channels)
    x = x.to(next(net.parameters()).dtype)
    size = x.shape[-2:]
    side = []
    f = x
    for stage, head in zip(net.stages, net.heads):
        f = stage(f)
        a = head(f)
        if a.shape[-2:] != size:
            a = F.interpolate(a, size=size, mode="bilinear", align_corners=False)
        side.append(a)
    return progressive_outputs(side)


_PROB_FLOOR = 1e-12


def _weighted_ce(probs: torch.Tensor, y: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Prevalence-weighted cross-entropy, averaged per item over labeled pixels.

    Takes probabilities (not logits) so fused predictions, which average
    probability maps across phases, plug in directly. IGNORE pixels
    contribute nothing; an all-IGNORE item contributes zero.
    """
    logp = torch.log(probs.clamp_min(_PROB_FLOOR))
    valid = y != IGNORE_LABEL
    y_safe = torch.where(valid, y, torch.zeros_like(y))
    nll = -logp.gather(1, y_safe[:, None]).squeeze(1)
    w = weights.to(logp.dtype)[y_safe]
    per_item = (nll * w * valid).sum(dim=(1, 2)) / valid.sum(dim=(1, 2)).clamp(min=1)
    return per_item.mean()


def staged_seg_loss(outs: StageOutputs, y, class_weights) -> torch.Tensor:
    """Stage-weighted supervised loss: sum_m (m/5) * weighted CE of stage m."""
    labels = _as_label_batch(y)
    w = torch.as_tensor(np.asarray(class_weights, dtype=np.float64))
    n = len(outs.probs)
    loss = outs.probs[0].new_zeros(())
    for m, p in enumerate(outs.probs, start=1):
        loss = loss + (m / n) * _weighted_ce(p, labels, w)
    return loss


def supervised_loss(net: PhnnNet, images, labels, class_weights) -> torch.Tensor:
    """Batch mean of the staged loss over labeled slices."""
    x = _as_image_batch(images, net.config.in_channels)
    if x.shape[0] == 0:
        raise ValueError("supervised_loss needs a non-empty batch")
    return staged_seg_loss(phnn_forward(net, x), labels, class_weights)


def prevalence_weights(class_counts) -> np.ndarray:
    """Inverse-frequency class weights normalized to mean 1."""
    c = np.maximum(np.asarray(class_counts, dtype=np.float64), 1.0)
    inv = c.sum() / c
    return inv / inv.mean()


CHECKPOINT_FORMAT = "cohetseg-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: nn.Module, step: int = 0, kind: str = "phnn",
                    extra: Optional[dict] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": asdict(net.config),
        "step": int(step),
        "state": net.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def _load_payload(path, kind: str) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    if payload.get("kind") != kind:
        raise ValueError(f"{path}: checkpoint kind {payload.get('kind')!r}, expected {kind!r}")
    return payload


def load_checkpoint(path) -> tuple[PhnnNet, int]:
    payload = _load_payload(path, "phnn")
    net = PhnnNet(BackboneConfig(**payload["config"]))
    net.load_state_dict(payload["state"])
    return net, payload["step"]


def checkpoint_kind(path) -> str:
    """Network kind stored in a checkpoint ("phnn" or "cohetero")."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    return payload["kind"]
