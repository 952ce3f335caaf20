"""Deterministic synthetic multi-phase CT phantoms.

The generator builds abdominal look-alikes at desk scale: an ellipsoidal
liver with embedded lesions on a textured background, plus a spleen-like
distractor structure. The four contrast phases render the same anatomy
under different intensity curves, so phases behave like four views of one
mask, which is exactly what the downstream consistency training consumes.

Two domains are produced. The source domain contains only venous-phase
volumes with full ground truth. The target domain is multi-phase, carries
a global intensity bias and enlarged organs, may drop phases, and renders a
configurable fraction of lesions as background-intensity cavities: treated
lesions that a source-trained model cannot recognize and leaves as holes in
its liver-region prediction. Source studies never contain those features.

Every study is a pure function of (config seed, domain, index), so parallel
and serial generation agree and tests can regenerate any study in isolation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .phases import PHASES
from .volume_io import (
    IGNORE_LABEL,
    LabelMask,
    Study,
    Volume,
    read_manifest,
    read_volume,
    write_manifest,
    write_volume,
)

_DOMAIN_CODE = {"source": 1, "target": 2}


def _phase_map(nc, a, v, d) -> dict[str, float]:
    return {"NC": nc, "A": a, "V": v, "D": d}


@dataclass
class SynthConfig:
    """Knobs for the phantom generator.

    The per-phase level tables define the appearance of each tissue in each
    phase; the target-only fields define the domain shift. Magnitudes are
    free parameters chosen so that a venous-only source model degrades on
    the target domain in a controlled way.
    """

    seed: int = 0

    # counts per domain/split
    n_source_train: int = 60
    n_source_val: int = 10
    n_target_train: int = 120
    n_target_val: int = 8
    n_target_test: int = 30

    # geometry
    shape: tuple[int, int, int] = (18, 48, 48)
    spacing: tuple[float, float, float] = (2.0, 1.0, 1.0)
    liver_radii_frac: tuple[float, float, float] = (0.36, 0.30, 0.30)
    radius_jitter: float = 0.10
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_rho_range: tuple[float, float] = (0.22, 0.34)
    cavity_rho_range: tuple[float, float] = (0.40, 0.55)

    # appearance (per phase NC, A, V, D)
    bg_level_range: tuple[float, float] = (0.12, 0.38)  # per-study draw; the
    # background palette is shared by both domains so only organ appearance
    # separates them
    texture_amp: float = 0.04
    texture_sigma: float = 3.0
    edge_sigma: float = 0.6
    liver_levels: dict[str, float] = field(default_factory=lambda: _phase_map(0.18, 0.55, 0.72, 0.60))
    lesion_levels: dict[str, float] = field(default_factory=lambda: _phase_map(0.30, 0.40, 0.42, 0.36))
    distractor_levels: dict[str, float] = field(default_factory=lambda: _phase_map(0.30, 0.60, 0.66, 0.52))
    noise_levels: dict[str, float] = field(default_factory=lambda: _phase_map(0.035, 0.025, 0.020, 0.025))
    distractor_prob: float = 1.0
    # Treated lesions: a void core surrounded by a hyperdense deposit rim.
    # The core sits inside the background intensity range, so a
    # source-trained model reads it as background (an enclosed hole in the
    # predicted region); the bright rim marks it as enclosed for any model
    # that learns to look.
    cavity_intensity: float = 0.26
    cavity_rim_intensity: float = 0.60
    cavity_rim_width: float = 0.12  # in normalized ellipsoid radius units

    # target-only shift
    target_bias: float = -0.07
    organ_scale: float = 1.15
    cavity_prob: float = 0.35
    missing_phase_prob: float = 0.35

    def validate(self) -> None:
        counts = (self.n_source_train, self.n_source_val, self.n_target_train,
                  self.n_target_val, self.n_target_test)
        if any(c < 1 for c in counts):
            raise ConfigError(f"all split counts must be >= 1, got {counts}")
        for name in ("cavity_prob", "missing_phase_prob", "distractor_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if len(self.shape) != 3 or any(s < 1 for s in self.shape):
            raise ConfigError(f"bad volume shape {self.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError(f"bad spacing {self.spacing}")
        if self.organ_scale <= 0:
            raise ConfigError(f"organ_scale must be positive, got {self.organ_scale}")
        lo, hi = self.lesion_count_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad lesion_count_range {self.lesion_count_range}")
        for tbl in (self.liver_levels, self.lesion_levels, self.distractor_levels,
                    self.noise_levels):
            if set(tbl) != set(PHASES):
                raise ConfigError(f"phase table must cover {PHASES}, got {sorted(tbl)}")

    def domain_count(self, domain: str) -> int:
        if domain == "source":
            return self.n_source_train + self.n_source_val
        if domain == "target":
            return self.n_target_train + self.n_target_val + self.n_target_test
        raise ConfigError(f"unknown domain {domain!r}")


def _study_rng(cfg: SynthConfig, domain: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, _DOMAIN_CODE[domain], index)))


def _ellipsoid(shape, center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    return (((zz - center[0]) / radii[0]) ** 2
            + ((yy - center[1]) / radii[1]) ** 2
            + ((xx - center[2]) / radii[2]) ** 2) <= 1.0


def generate_study(cfg: SynthConfig, domain: str, index: int,
                   allow_missing_phases: bool = True) -> Study:
    """Build one study as a pure function of (cfg.seed, domain, index).

    ``allow_missing_phases=False`` keeps all four phases for target
    studies (used for evaluation splits, so every view is scoreable).
    """
    cfg.validate()
    if domain not in _DOMAIN_CODE:
        raise ConfigError(f"unknown domain {domain!r}")
    if not 0 <= index < cfg.domain_count(domain):
        raise ConfigError(f"index {index} out of range for domain {domain!r}")
    rng = _study_rng(cfg, domain, index)
    shape = cfg.shape
    scale = cfg.organ_scale if domain == "target" else 1.0

    # liver geometry
    jit = cfg.radius_jitter
    center = np.array([shape[0] / 2.0, shape[1] / 2.0, shape[2] / 2.0])
    center += rng.uniform(-1.0, 1.0, size=3) * np.array([1.0, 2.0, 2.0])
    radii = np.array(cfg.liver_radii_frac) * np.array(shape) * scale
    radii *= rng.uniform(1.0 - jit, 1.0 + jit, size=3)
    liver = _ellipsoid(shape, center, radii)

    # lesions: scaled copies of the liver ellipsoid in normalized coordinates,
    # so they always fit inside regardless of anisotropy
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    wz = (zz - center[0]) / radii[0]
    wy = (yy - center[1]) / radii[1]
    wx = (xx - center[2]) / radii[2]
    n_lesions = int(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1))
    lesion_mask = np.zeros(shape, dtype=bool)
    cavity_core = np.zeros(shape, dtype=bool)
    cavity_rim = np.zeros(shape, dtype=bool)
    n_cavities = 0
    for _ in range(n_lesions):
        cavity = domain == "target" and rng.random() < cfg.cavity_prob
        rho_lo, rho_hi = cfg.cavity_rho_range if cavity else cfg.lesion_rho_range
        rho = rng.uniform(rho_lo, rho_hi)
        u = rng.uniform(-1.0, 1.0, size=3)
        norm = np.sqrt(np.sum(u * u))
        u = u / max(norm, 1e-9) * rng.uniform(0.0, max(0.85 - rho, 0.05))
        dist2 = (wz - u[0]) ** 2 + (wy - u[1]) ** 2 + (wx - u[2]) ** 2
        blob = (dist2 <= rho * rho) & liver
        lesion_mask |= blob
        if cavity:
            core_rho = max(rho - cfg.cavity_rim_width, 0.05)
            core = (dist2 <= core_rho * core_rho) & liver
            cavity_core |= core
            cavity_rim |= blob & ~core
            n_cavities += 1

    # spleen-like distractor: liver-bright in V but labeled background
    has_distractor = rng.random() < cfg.distractor_prob
    if has_distractor:
        side = rng.choice([-1.0, 1.0])
        d_center = np.array([
            center[0] + rng.uniform(-1.0, 1.0),
            center[1] + side * radii[1] * rng.uniform(1.25, 1.45),
            center[2] + rng.uniform(-1.0, 1.0) * 3.0,
        ])
        d_radii = radii * np.array([0.55, 0.32, 0.40]) * rng.uniform(0.9, 1.1, size=3)
        distractor = _ellipsoid(shape, d_center, d_radii) & ~liver
    else:
        distractor = np.zeros(shape, dtype=bool)

    labels = np.zeros(shape, dtype=np.uint8)
    labels[liver] = 1
    labels[lesion_mask] = 2
    assert labels.max() >= 1 and np.any(labels[:, :, :].any(axis=(1, 2))), \
        "generator must produce at least one liver-containing slice"

    # phase selection
    if domain == "source":
        phases = ("V",)
    else:
        phases = PHASES
        if allow_missing_phases and rng.random() < cfg.missing_phase_prob:
            n_drop = int(rng.integers(1, 4))
            dropped = rng.choice(len(PHASES), size=n_drop, replace=False)
            phases = tuple(p for i, p in enumerate(PHASES) if i not in set(dropped))

    # shared anatomy texture; per-phase noise drawn per kept phase
    texture = rng.standard_normal(shape)
    texture = gaussian_filter(texture, cfg.texture_sigma)
    texture /= max(np.abs(texture).max(), 1e-9)

    bg = rng.uniform(*cfg.bg_level_range)
    bias = cfg.target_bias if domain == "target" else 0.0
    vols: dict[str, Volume] = {}
    for p in phases:
        img = np.full(shape, bg, dtype=np.float64)
        # the shift is an organ-enhancement shift: contrast timing moves
        # parenchyma appearance, while background tissue and inert deposits
        # read the same in both domains
        img[liver] = cfg.liver_levels[p] + bias
        img[lesion_mask] = cfg.lesion_levels[p] + bias
        img[cavity_rim] = cfg.cavity_rim_intensity
        img[cavity_core] = cfg.cavity_intensity
        img[distractor] = cfg.distractor_levels[p] + bias
        img += cfg.texture_amp * texture
        img = gaussian_filter(img, cfg.edge_sigma)
        img += rng.normal(0.0, cfg.noise_levels[p], size=shape)
        vols[p] = Volume(np.clip(img, 0.0, 1.0).astype(np.float32), spacing=cfg.spacing)

    sid = f"{'src' if domain == 'source' else 'tgt'}-{index:04d}"
    meta = {
        "n_lesions": n_lesions,
        "n_cavities": n_cavities,
        "liver_frac": float(np.count_nonzero(labels) / labels.size),
    }
    return Study(id=sid, phases=vols, mask=LabelMask(labels, spacing=cfg.spacing),
                 domain=domain, meta=meta)


@dataclass
class SynthDatasets:
    """Generated splits. ``target_train`` carries no masks."""

    source_train: list[Study]
    source_val: list[Study]
    target_train: list[Study]
    target_val: list[Study]
    target_test: list[Study]

    def splits(self) -> dict[str, list[Study]]:
        return {
            "source/train": self.source_train,
            "source/val": self.source_val,
            "target/train": self.target_train,
            "target/val": self.target_val,
            "target/test": self.target_test,
        }


def generate_datasets(cfg: SynthConfig) -> SynthDatasets:
    """Generate all splits; ids are pairwise disjoint across splits.

    Source studies are fully labeled. Target training studies have their
    ground truth stripped before being handed to any consumer; only the
    held-out target validation/test splits keep masks, for evaluation.
    """
    cfg.validate()
    src = [generate_study(cfg, "source", i) for i in range(cfg.domain_count("source"))]
    n_tt = cfg.n_target_train
    n_tv = cfg.n_target_val
    tgt = [generate_study(cfg, "target", i, allow_missing_phases=(i < n_tt))
           for i in range(cfg.domain_count("target"))]
    target_train = [replace(s, mask=None) for s in tgt[:n_tt]]
    return SynthDatasets(
        source_train=src[: cfg.n_source_train],
        source_val=src[cfg.n_source_train:],
        target_train=target_train,
        target_val=tgt[n_tt: n_tt + n_tv],
        target_test=tgt[n_tt + n_tv:],
    )


# --------------------------------------------------------------------------
# On-disk layout: studies/<id>/<phase>.vol (+ mask.vol), manifest, meta table.
# --------------------------------------------------------------------------


def save_datasets(datasets: SynthDatasets, root: str | Path) -> Path:
    root = Path(root)
    records = []
    meta_rows = []
    for split, studies in datasets.splits().items():
        for s in studies:
            sdir = root / "studies" / s.id
            paths = []
            for p in s.available:
                rel = f"studies/{s.id}/{p}.vol"
                write_volume(root / rel, s.phases[p])
                paths.append(rel)
            if s.mask is not None:
                rel = f"studies/{s.id}/mask.vol"
                write_volume(root / rel, s.mask)
                paths.append(rel)
            records.append({
                "id": s.id, "domain": s.domain, "split": split,
                "phases": s.available, "paths": paths,
            })
            meta_rows.append({"id": s.id, **{k: s.meta.get(k, "") for k in
                                             ("n_lesions", "n_cavities", "liver_frac")}})
    write_manifest(records, root)
    with open(root / "meta.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["id", "n_lesions", "n_cavities", "liver_frac"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(meta_rows)
    return root / "manifest.tsv"


def load_datasets(root: str | Path) -> SynthDatasets:
    root = Path(root)
    meta: dict[str, dict] = {}
    meta_path = root / "meta.csv"
    if meta_path.exists():
        with open(meta_path, newline="") as f:
            for row in csv.DictReader(f):
                meta[row["id"]] = {
                    "n_lesions": int(row["n_lesions"]),
                    "n_cavities": int(row["n_cavities"]),
                    "liver_frac": float(row["liver_frac"]),
                }
    buckets: dict[str, list[Study]] = {k: [] for k in (
        "source/train", "source/val", "target/train", "target/val", "target/test")}
    for rec in read_manifest(root):
        phases = {}
        mask = None
        for rel in rec["paths"]:
            vol = read_volume(root / rel)
            name = Path(rel).name
            if name == "mask.vol":
                mask = vol
            else:
                phases[name[:-len(".vol")]] = vol
        study = Study(id=rec["id"], phases=phases, mask=mask, domain=rec["domain"],
                      meta=meta.get(rec["id"], {}))
        if rec["split"] not in buckets:
            raise ConfigError(f"manifest split {rec['split']!r} not recognized")
        buckets[rec["split"]].append(study)
    return SynthDatasets(
        source_train=buckets["source/train"],
        source_val=buckets["source/val"],
        target_train=buckets["target/train"],
        target_val=buckets["target/val"],
        target_test=buckets["target/test"],
    )


def class_frequencies(studies: Iterable[Study]) -> np.ndarray:
    """Voxel counts of classes (background, liver, lesion) over study masks."""
    counts = np.zeros(3, dtype=np.int64)
    for s in studies:
        if s.mask is None:
            continue
        lab = s.mask.labels
        valid = lab != IGNORE_LABEL
        counts += np.bincount(lab[valid].astype(np.int64), minlength=3)[:3]
    return counts
