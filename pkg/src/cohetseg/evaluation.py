"""Volumetric evaluation: overlap and surface metrics, voting, reporting.

Predictions are made slice by slice and stacked into 3D masks. Scoring is
on the liver region (liver plus lesion classes), matching how unlabeled-
domain ground truth is annotated. Fusion networks are scored per phase
subset; single-phase networks get multi-phase rows via majority voting
over their per-phase predictions. Report CSVs are byte-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from .backbone import PhnnNet, phnn_forward
from .fusion import CoHeteroNet, enumerate_views, hetero_forward
from .phases import PHASES, canonical_phases
from .volume_io import Study

_SIX_CONN = ndimage.generate_binary_structure(3, 1)


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice overlap 2|P∩G|/(|P|+|G|); two empty masks count as perfect."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbor background voxel.

    Voxels on the array boundary count their outside neighbors as
    background.
    """
    mask = np.asarray(mask).astype(bool)
    eroded = ndimage.binary_erosion(mask, structure=_SIX_CONN, border_value=0)
    return mask & ~eroded


def assd(pred: np.ndarray, gt: np.ndarray, spacing) -> float:
    """Average symmetric surface distance in physical units.

    Undefined when either mask is empty; returned as NaN so callers can
    report it as missing.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return float("nan")
    sp = np.asarray(spacing, dtype=np.float64)
    pts_p = np.argwhere(surface_voxels(pred)) * sp
    pts_g = np.argwhere(surface_voxels(gt)) * sp
    d_pg = cKDTree(pts_g).query(pts_p)[0]
    d_gp = cKDTree(pts_p).query(pts_g)[0]
    return float((d_pg.sum() + d_gp.sum()) / (len(d_pg) + len(d_gp)))


def stack_slices(slices) -> np.ndarray:
    """Concatenate ordered 2D label maps into a (z, y, x) volume."""
    slices = list(slices)
    if not slices:
        raise ValueError("no slices to stack")
    shapes = {np.asarray(s).shape for s in slices}
    if len(shapes) != 1:
        raise ValueError(f"slice shapes disagree: {sorted(shapes)}")
    return np.stack([np.asarray(s) for s in slices], axis=0)


def majority_vote(masks: list[np.ndarray]) -> np.ndarray:
    """Per-voxel vote over binary masks; even ties go to background."""
    if not masks:
        raise ValueError("need at least one mask")
    arrs = [np.asarray(m).astype(bool) for m in masks]
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ValueError(f"mask shapes disagree: {sorted(shapes)}")
    n = len(arrs)
    counts = np.sum(arrs, axis=0)
    return counts >= (n + 2) // 2


# --------------------------------------------------------------------------
# Slice-wise inference.
# --------------------------------------------------------------------------


def _slice_ranges(depth: int, batch: int):
    for z0 in range(0, depth, batch):
        yield z0, min(z0 + batch, depth)


def predict_labels_hetero(net: CoHeteroNet, study: Study, combo,
                          slice_batch: int = 16) -> np.ndarray:
    """Argmax label volume from one phase subset of a study."""
    combo = canonical_phases(combo)
    vols = {p: study.phases[p].voxels for p in combo}
    depth = study.shape[0]
    out = []
    with torch.no_grad():
        for z0, z1 in _slice_ranges(depth, slice_batch):
            slices = {p: torch.from_numpy(vols[p][z0:z1]).float()[:, None] for p in combo}
            pred = hetero_forward(net, slices, combo).final.argmax(dim=1)
            out.extend(pred.numpy().astype(np.uint8))
    return stack_slices(out)


def predict_labels_backbone(net: PhnnNet, study: Study, phase: str,
                            slice_batch: int = 16) -> np.ndarray:
    """Argmax label volume from a single phase with the plain backbone."""
    vol = study.phases[phase].voxels
    out = []
    with torch.no_grad():
        for z0, z1 in _slice_ranges(study.shape[0], slice_batch):
            x = torch.from_numpy(vol[z0:z1]).float()[:, None]
            pred = phnn_forward(net, x).final.argmax(dim=1)
            out.extend(pred.numpy().astype(np.uint8))
    return stack_slices(out)


def predict_region(net, study: Study, combo, slice_batch: int = 16) -> np.ndarray:
    """Binary liver-region prediction for one phase subset.

    Fusion networks consume the subset directly; single-phase networks
    predict each phase separately and majority-vote the binarized maps.
    """
    combo = canonical_phases(combo)
    if isinstance(net, CoHeteroNet):
        lab = predict_labels_hetero(net, study, combo, slice_batch=slice_batch)
        return (lab == 1) | (lab == 2)
    regions = []
    for p in combo:
        lab = predict_labels_backbone(net, study, p, slice_batch=slice_batch)
        regions.append((lab == 1) | (lab == 2))
    return majority_vote(regions)


# --------------------------------------------------------------------------
# Reports.
# --------------------------------------------------------------------------

MODES = ("single", "all-available", "all-combos")


@dataclass
class MetricRow:
    study_id: str
    combo: str
    dsc: float
    assd: float
    status: str = "ok"


@dataclass
class MetricReport:
    mode: str
    method: str  # "hetero" or "vote"
    rows: list[MetricRow] = field(default_factory=list)

    def scored(self) -> list[MetricRow]:
        return [r for r in self.rows if r.status == "ok"]

    def mean_dsc(self, combo: str | None = None) -> float:
        vals = [r.dsc for r in self.scored() if combo is None or r.combo == combo]
        return float(np.mean(vals)) if vals else float("nan")

    def combos(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.combo not in seen:
                seen.append(r.combo)
        return seen

    def aggregates(self) -> list[dict]:
        out = []
        for combo in self.combos():
            scored = [r for r in self.rows if r.combo == combo and r.status == "ok"]
            skipped = [r for r in self.rows if r.combo == combo and r.status != "ok"]
            d = np.array([r.dsc for r in scored], dtype=np.float64)
            a = np.array([r.assd for r in scored], dtype=np.float64)
            a_ok = a[~np.isnan(a)]
            row = {"combo": combo, "n": len(scored), "n_skipped": len(skipped),
                   "n_assd_missing": int(np.isnan(a).sum())}
            if len(d):
                q1, med, q3 = np.percentile(d, [25, 50, 75])
                row.update(dsc_mean=float(d.mean()), dsc_std=float(d.std()),
                           dsc_min=float(d.min()), dsc_q1=float(q1),
                           dsc_median=float(med), dsc_q3=float(q3),
                           dsc_max=float(d.max()))
            row["assd_mean"] = float(a_ok.mean()) if len(a_ok) else float("nan")
            out.append(row)
        return out


def _combo_label(combo) -> str:
    return "+".join(combo)


def evaluate(net, studies: list[Study], mode: str, slice_batch: int = 16) -> MetricReport:
    """Score every (study, combo) pair for the requested mode.

    Modes: "single" (each available phase alone), "all-available" (one
    row per study, full phase set), "all-combos" (all 15 subsets of the
    four phases; subsets a study lacks are listed as skipped).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    method = "hetero" if isinstance(net, CoHeteroNet) else "vote"
    report = MetricReport(mode=mode, method=method)
    for study in studies:
        if study.mask is None:
            raise ValueError(f"study {study.id} has no ground truth")
        gt = study.mask.region()
        if mode == "single":
            combos = [(p,) for p in study.available]
        elif mode == "all-available":
            combos = [study.available]
        else:
            combos = enumerate_views(PHASES)
        for combo in combos:
            label = _combo_label(combo)
            if not set(combo) <= set(study.available):
                report.rows.append(MetricRow(study.id, label, float("nan"),
                                             float("nan"), "skipped:missing-phase"))
                continue
            pred = predict_region(net, study, combo, slice_batch=slice_batch)
            report.rows.append(MetricRow(
                study.id, label, dsc(pred, gt), assd(pred, gt, study.spacing)))
    return report


def _fmt(x: float) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return "%.6f" % x


def write_rows_csv(report: MetricReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["study,combo,dsc,assd,status"]
    for r in report.rows:
        lines.append(f"{r.study_id},{r.combo},{_fmt(r.dsc)},{_fmt(r.assd)},{r.status}")
    path.write_text("\n".join(lines) + "\n")


def write_aggregate_csv(report: MetricReport, path) -> None:
    """Per-combo summary including box-whisker stats for external plotting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ("combo", "n", "n_skipped", "n_assd_missing", "dsc_mean", "dsc_std",
            "dsc_min", "dsc_q1", "dsc_median", "dsc_q3", "dsc_max", "assd_mean")
    lines = [",".join(cols)]
    for agg in report.aggregates():
        cells = []
        for c in cols:
            v = agg.get(c)
            cells.append(str(v) if isinstance(v, (int, str)) else _fmt(v))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


def write_report(report: MetricReport, out_dir) -> Path:
    """Emit rows.csv, aggregate.csv and summary.txt into ``out_dir``."""
    out_dir = Path(out_dir)
    write_rows_csv(report, out_dir / "rows.csv")
    write_aggregate_csv(report, out_dir / "aggregate.csv")
    write_text_summary(report, out_dir / "summary.txt")
    return out_dir


def write_text_summary(report: MetricReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"mode: {report.mode}", f"method: {report.method}",
             f"studies scored: {len({r.study_id for r in report.scored()})}", ""]
    for agg in report.aggregates():
        if agg["n"] == 0:
            lines.append(f"{agg['combo']:>11}  (no scored studies)")
            continue
        lines.append("%11s  dsc %.4f +/- %.4f  assd %s  (n=%d)" % (
            agg["combo"], agg["dsc_mean"], agg["dsc_std"],
            _fmt(agg.get("assd_mean")) or "n/a", agg["n"]))
    path.write_text("\n".join(lines) + "\n")
