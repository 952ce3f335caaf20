"""Consensus predictions and the JSD agreement loss on unlabeled data.

Given several probability maps for the same anatomy (one per phase, or one
per phase subset), the consensus is their per-pixel mean and the loss is
the mean KL divergence of each prediction from that consensus, i.e. the
generalized Jensen-Shannon divergence. Reported per pixel so the value is
independent of slice resolution.
"""

from __future__ import annotations

import torch

EPSILON = 1e-7


def consensus(preds: list[torch.Tensor]) -> torch.Tensor:
    """Per-pixel arithmetic mean of a nonempty prediction set."""
    if not preds:
        raise ValueError("need at least one prediction")
    shapes = {tuple(p.shape) for p in preds}
    if len(shapes) != 1:
        raise ValueError(f"prediction shapes disagree: {sorted(shapes)}")
    if len(preds) == 1:
        return preds[0]
    # Reduce in per-pixel value-sorted order: float addition commutes but
    # does not associate, so a positional sum would leak the list order
    # into the low bits. Sorting first makes the mean a function of the
    # prediction multiset only.
    ordered = torch.stack(preds).sort(dim=0).values
    return ordered.sum(dim=0) / len(preds)


def kl_pixel(p, q) -> torch.Tensor:
    """KL(p || q) over the class axis (last), natural log, 0*log(0) = 0.

    q is clamped below by EPSILON so one-hot saturation stays finite.
    """
    p = torch.as_tensor(p, dtype=torch.get_default_dtype()) if not torch.is_tensor(p) else p
    q = torch.as_tensor(q, dtype=p.dtype) if not torch.is_tensor(q) else q
    terms = p * (torch.log(p.clamp_min(EPSILON)) - torch.log(q.clamp_min(EPSILON)))
    return terms.sum(dim=-1)


def _kl_maps(p: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Sum over classes of p*log(p/m) for (N, C, H, W) maps; returns (N, H, W)."""
    return (p * (torch.log(p.clamp_min(EPSILON)) - torch.log(m.clamp_min(EPSILON)))).sum(dim=1)


def jsd_loss(preds: list[torch.Tensor], detach_consensus: bool = False) -> torch.Tensor:
    """Mean over predictions and pixels of KL(prediction || consensus).

    By default gradients flow through the consensus as well; with
    ``detach_consensus`` the consensus acts as a fixed per-step pseudo
    label (the self-learning reading of the loss).
    """
    m = consensus(preds)
    if detach_consensus:
        m = m.detach()
    # Value-sorted reduction for the same reason as in consensus(): the
    # loss must not depend on how the prediction list happens to be ordered.
    kl = torch.stack([_kl_maps(p, m) for p in preds])
    total = kl.sort(dim=0).values.sum(dim=0)
    return total.mean() / len(preds)


def cons_loss_batch(net, items, detach_consensus: bool = False) -> torch.Tensor:
    """Batch mean of the JSD loss over sampled views of unlabeled studies.

    ``items`` is a list of (slices, combos): slices maps phase -> slice
    batch, combos is the sampled subset of that study's views. An item
    with fewer than two views cannot disagree and contributes zero.
    """
    from .fusion import hetero_forward

    if not items:
        raise ValueError("cons_loss_batch needs a non-empty batch")
    losses = []
    for slices, combos in items:
        if len(combos) < 2:  # a single view cannot disagree with itself
            continue
        preds = [hetero_forward(net, slices, c).final for c in combos]
        losses.append(jsd_loss(preds, detach_consensus=detach_consensus))
    if not losses:
        return next(net.parameters()).new_zeros(())
    return torch.stack(losses).sum() / len(items)
