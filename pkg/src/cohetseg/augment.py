"""Per-slice training augmentation: rotation, elastic warp, gamma, scaling.

Parameters are ranges; each call draws concrete values from its own seeded
generator, so the same seed reproduces the same augmentation exactly (and
co-registered phase images stay aligned when augmented with a shared seed).
Degenerate ranges pin a transform, e.g. ``rotation_deg=(90, 90)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates


@dataclass
class AugmentParams:
    rotation_deg: tuple[float, float] = (-10.0, 10.0)
    scale: tuple[float, float] = (0.9, 1.1)
    gamma: tuple[float, float] = (0.85, 1.2)
    elastic_alpha: tuple[float, float] = (0.0, 4.0)
    elastic_sigma: float = 4.0

    @staticmethod
    def identity() -> "AugmentParams":
        return AugmentParams((0.0, 0.0), (1.0, 1.0), (1.0, 1.0), (0.0, 0.0))


def augment_slice(
    image: np.ndarray,
    mask: Optional[np.ndarray],
    params: AugmentParams,
    seed: int | np.random.SeedSequence,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Apply the four augmentations to a 2D slice and its aligned label mask.

    The image is resampled bilinearly, the mask with nearest neighbor so
    label values are preserved. Identity parameters return the inputs
    unchanged, bit for bit.
    """
    if mask is not None and mask.shape != image.shape:
        raise ValueError(f"mask shape {mask.shape} != image shape {image.shape}")
    rng = np.random.default_rng(seed)
    rot = rng.uniform(*params.rotation_deg)
    scale = rng.uniform(*params.scale)
    gamma = rng.uniform(*params.gamma)
    alpha = rng.uniform(*params.elastic_alpha)

    out_img = image
    out_mask = mask
    if rot != 0.0 or scale != 1.0 or alpha != 0.0:
        h, w = image.shape
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        yr = yy - cy
        xr = xx - cx
        # inverse map: undo scaling then rotation about the slice center
        theta = -np.deg2rad(rot)
        ys = (np.cos(theta) * yr - np.sin(theta) * xr) / scale + cy
        xs = (np.sin(theta) * yr + np.cos(theta) * xr) / scale + cx
        if alpha != 0.0:
            dy = gaussian_filter(rng.uniform(-1, 1, size=image.shape),
                                 params.elastic_sigma) * alpha
            dx = gaussian_filter(rng.uniform(-1, 1, size=image.shape),
                                 params.elastic_sigma) * alpha
            ys = ys + dy
            xs = xs + dx
        coords = np.stack([ys, xs])
        out_img = map_coordinates(image.astype(np.float64), coords, order=1,
                                  mode="nearest").astype(image.dtype)
        if mask is not None:
            out_mask = map_coordinates(mask, coords, order=0, mode="nearest")

    if gamma != 1.0:
        out_img = np.clip(out_img, 0.0, 1.0) ** gamma
        out_img = out_img.astype(image.dtype)
    return out_img, out_mask
