"""Output-space adversarial alignment of predicted liver-region maps.

A small dilated-convolution discriminator scores each pixel of a
liver-region probability map as "came from labeled-domain prediction"
(1) vs "unlabeled-domain prediction" (0). The segmenter is trained to
fool it on the consensus over phase subsets, which adapts every subset's
prediction at the cost of a single discriminator evaluation per step.
"""

from __future__ import annotations

from collections import Counter
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

EPSILON = 1e-7
DILATIONS = (1, 2, 3, 4)


class AsppDiscriminator(nn.Module):
    """Parallel dilated 3x3 convs (rates 1-4), summed, leaky ReLU, 1x1 conv.

    Per-pixel logistic output with the input's spatial shape. ``calls``
    counts forward passes per declared origin so training code can assert
    how many evaluations a step really spent.
    """

    def __init__(self, in_channels: int = 1, width: int = 32):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, width, 3, padding=d, dilation=d) for d in DILATIONS)
        self.collapse = nn.Conv2d(width, 1, 1)
        self.calls: Counter = Counter()

    def forward(self, region: torch.Tensor, origin: str = "unspecified") -> torch.Tensor:
        self.calls[origin] += 1
        h = self.branches[0](region)
        for branch in self.branches[1:]:
            h = h + branch(region)
        h = F.leaky_relu(h, negative_slope=0.2)
        return torch.sigmoid(self.collapse(h))


def liver_region_map(pred: torch.Tensor) -> torch.Tensor:
    """Probability of liver region (liver + lesion classes) per pixel.

    (N, 3, H, W) probabilities -> (N, 1, H, W); equals 1 - background.
    """
    return pred[:, 1:].sum(dim=1, keepdim=True)


def _bce(scores: torch.Tensor, label: float) -> torch.Tensor:
    s = scores.clamp(EPSILON, 1.0 - EPSILON)
    if label == 1.0:
        return -torch.log(s).mean()
    if label == 0.0:
        return -torch.log(1.0 - s).mean()
    return -(label * torch.log(s) + (1.0 - label) * torch.log(1.0 - s)).mean()


def discriminator_loss(d: AsppDiscriminator, source_region: torch.Tensor,
                       target_region: Optional[torch.Tensor] = None, *,
                       target_scores: Optional[torch.Tensor] = None) -> torch.Tensor:
    """BCE pushing d to 1 on source regions and 0 on target consensus regions.

    Pass ``target_scores`` to reuse an already computed d(target_region)
    instead of spending a second forward on the target batch.
    """
    if (target_region is None) == (target_scores is None):
        raise ValueError("provide exactly one of target_region / target_scores")
    s = d(source_region, origin="source")
    t = target_scores if target_scores is not None else d(target_region, origin="target")
    return _bce(s, 1.0) + _bce(t, 0.0)


def adversarial_loss(d: AsppDiscriminator, target_region: Optional[torch.Tensor] = None, *,
                     target_scores: Optional[torch.Tensor] = None) -> torch.Tensor:
    """BCE with flipped label: the segmenter wants d to say 1 on target."""
    if (target_region is None) == (target_scores is None):
        raise ValueError("provide exactly one of target_region / target_scores")
    t = target_scores if target_scores is not None else d(target_region, origin="target")
    return _bce(t, 1.0)
