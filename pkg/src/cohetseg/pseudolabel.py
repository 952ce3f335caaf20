"""Mining enclosed cavities in predicted liver regions as lesion pseudo labels.

Treated lesions can look like anything, including regions the model reads
as background; but a background pocket fully enclosed by predicted liver
is almost certainly a missed lesion. Each such 3D hole larger than the
size threshold becomes a lesion pseudo label, with every other voxel
ignored so the rest of the prediction is never contradicted.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .volume_io import (
    IGNORE_LABEL,
    LabelMask,
    Study,
    read_manifest,
    read_volume,
    write_manifest,
    write_volume,
)

HOLE_MIN_VOXELS = 100
_SIX_CONN = ndimage.generate_binary_structure(3, 1)


def extract_holes(region: np.ndarray, min_size: int = HOLE_MIN_VOXELS) -> np.ndarray:
    """Binary mask of enclosed background cavities larger than min_size.

    A hole is a 6-connected component of the complement that does not
    reach the volume boundary; components must exceed min_size voxels
    (strictly) to count.
    """
    region = np.asarray(region).astype(bool)
    if region.ndim != 3:
        raise ValueError(f"expected a 3D mask, got shape {region.shape}")
    complement = ~region
    labels, n = ndimage.label(complement, structure=_SIX_CONN)
    if n == 0:
        return np.zeros_like(region)
    border = np.zeros_like(region)
    border[0, :, :] = border[-1, :, :] = True
    border[:, 0, :] = border[:, -1, :] = True
    border[:, :, 0] = border[:, :, -1] = True
    touching = np.unique(labels[border & complement])
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = np.ones(n + 1, dtype=bool)
    keep[0] = False
    keep[touching] = False
    keep &= sizes > min_size
    return keep[labels]


@dataclass
class HolesRecord:
    """Pseudo mask for one study: lesion label inside holes, IGNORE elsewhere."""

    study_id: str
    pseudo_mask: LabelMask
    hole_sizes: tuple[int, ...]


def holes_to_pseudo_mask(holes: np.ndarray, spacing) -> LabelMask:
    labels = np.full(holes.shape, IGNORE_LABEL, dtype=np.uint8)
    labels[holes] = 2
    return LabelMask(labels, spacing=tuple(spacing))


def build_holes_dataset(net, studies: list[Study], min_size: int = HOLE_MIN_VOXELS,
                        slice_batch: int = 16) -> list[HolesRecord]:
    """Predict every unlabeled study with all available phases and mine holes.

    Studies whose predicted liver region has no qualifying hole are
    omitted, so the result is a (possibly empty) subset of the input.
    """
    from .evaluation import predict_labels_hetero

    records = []
    for study in studies:
        pred = predict_labels_hetero(net, study, study.available, slice_batch=slice_batch)
        holes = extract_holes((pred == 1) | (pred == 2), min_size=min_size)
        if not holes.any():
            continue
        sizes = _component_sizes(holes)
        records.append(HolesRecord(study.id, holes_to_pseudo_mask(holes, study.spacing), sizes))
    return records


def _component_sizes(holes: np.ndarray) -> tuple[int, ...]:
    labels, n = ndimage.label(holes, structure=_SIX_CONN)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return tuple(int(s) for s in sorted(sizes, reverse=True))


def seg_loss_with_pseudo(net, labeled_slices, labeled_masks, class_weights,
                         holes_items, lambda_h: float = 0.01):
    """Supervised loss with an added pseudo-label term over mined holes.

    The labeled term is the usual staged loss on the single-phase labeled
    batch. The holes term averages, over holes items and their sampled
    phase subsets, the staged loss against the pseudo mask (all-IGNORE
    pixels contribute nothing). ``holes_items`` is a list of
    (slices, pseudo_labels, combos) with slices mapping phase -> batch.
    """
    from .backbone import staged_seg_loss
    from .fusion import hetero_forward

    labeled = staged_seg_loss(
        hetero_forward(net, {"V": labeled_slices}, ("V",)), labeled_masks, class_weights)
    if not holes_items or lambda_h == 0.0:
        return labeled
    terms = []
    for slices, pseudo, combos in holes_items:
        for combo in combos:
            outs = hetero_forward(net, slices, combo)
            terms.append(staged_seg_loss(outs, pseudo, class_weights))
    return labeled + lambda_h * torch.stack(terms).mean()


def save_holes_dataset(records: list[HolesRecord], root) -> None:
    """Persist pseudo masks under root/studies/<id>/holes.vol plus a manifest."""
    root = Path(root)
    rows = []
    for rec in records:
        rel = f"studies/{rec.study_id}/holes.vol"
        write_volume(root / rel, rec.pseudo_mask)
        rows.append({"id": rec.study_id, "domain": "target", "split": "holes",
                     "phases": (), "paths": (rel,)})
    write_manifest(rows, root)


def load_holes_dataset(root) -> list[HolesRecord]:
    root = Path(root)
    records = []
    for row in read_manifest(root):
        mask = read_volume(root / row["paths"][0])
        holes = mask.labels == 2
        records.append(HolesRecord(row["id"], mask, _component_sizes(holes)))
    return records
