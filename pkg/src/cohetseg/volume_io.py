"""Core volume containers and a portable raw-array file format.

Volumes are dense 3D arrays indexed (z, y, x) with a physical voxel spacing.
Label masks use 0 = background, 1 = liver, 2 = lesion plus a distinguished
IGNORE value that every loss must skip; IGNORE appears only in pseudo-label
masks, never in generated ground truth.

On disk a volume is a little-endian C-order payload at ``<path>`` plus a
sidecar text header at ``<path>.hdr`` describing kind, dtype, shape and
spacing. The round trip is bit exact, which the tests rely on.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .phases import canonical_phases

IGNORE_LABEL = 255
LABEL_VALUES = (0, 1, 2, IGNORE_LABEL)

HEADER_MAGIC = "cohetseg-volume"
HEADER_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "uint8": "|u1"}


class VolumeIOError(Exception):
    """Base class for volume file problems."""


class HeaderError(VolumeIOError):
    """Sidecar header missing, unparsable, or inconsistent."""


class PayloadSizeError(VolumeIOError):
    """Payload byte count does not match the header shape/dtype."""


@dataclass
class Volume:
    voxels: np.ndarray  # (z, y, x) intensities
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.voxels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume intensities must be finite")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class LabelMask:
    labels: np.ndarray  # (z, y, x) values in {0, 1, 2, IGNORE_LABEL}
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {self.labels.shape}")
        bad = np.setdiff1d(np.unique(self.labels), np.array(LABEL_VALUES, dtype=np.uint8))
        if bad.size:
            raise ValueError(f"mask contains invalid labels {bad.tolist()}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def region(self) -> np.ndarray:
        """Binary liver-region mask: union of liver and lesion labels."""
        return (self.labels == 1) | (self.labels == 2)


@dataclass
class Study:
    """One patient case: co-registered phase volumes plus optional ground truth."""

    id: str
    phases: dict[str, Volume]
    mask: Optional[LabelMask] = None
    domain: str = "source"  # "source" or "target"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.phases:
            raise ValueError(f"study {self.id}: needs at least one phase")
        canonical_phases(self.phases.keys())
        shapes = {v.shape for v in self.phases.values()}
        spacings = {v.spacing for v in self.phases.values()}
        if len(shapes) != 1 or len(spacings) != 1:
            raise ValueError(f"study {self.id}: phases disagree on shape/spacing")
        if self.mask is not None and self.mask.shape != next(iter(shapes)):
            raise ValueError(f"study {self.id}: mask shape does not match phases")
        if self.domain not in ("source", "target"):
            raise ValueError(f"study {self.id}: bad domain {self.domain!r}")

    @property
    def available(self) -> tuple[str, ...]:
        return canonical_phases(self.phases.keys())

    @property
    def shape(self) -> tuple[int, int, int]:
        return next(iter(self.phases.values())).shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        return next(iter(self.phases.values())).spacing


def write_volume(path: str | os.PathLike, vol: Volume | LabelMask) -> None:
    """Write ``vol`` as raw little-endian payload plus ``<path>.hdr`` sidecar."""
    path = Path(path)
    if isinstance(vol, LabelMask):
        kind, arr, spacing = "labels", vol.labels.astype("|u1"), vol.spacing
        dtype_name = "uint8"
    elif isinstance(vol, Volume):
        kind = "intensity"
        dtype_name = "float64" if vol.voxels.dtype == np.float64 else "float32"
        arr = vol.voxels.astype(_DTYPES[dtype_name])
        spacing = vol.spacing
    else:
        raise TypeError(f"expected Volume or LabelMask, got {type(vol).__name__}")
    lines = [
        f"format: {HEADER_MAGIC} v{HEADER_VERSION}",
        f"kind: {kind}",
        f"dtype: {dtype_name}",
        "shape: {} {} {}".format(*arr.shape),
        "spacing: {:.17g} {:.17g} {:.17g}".format(*spacing),
    ]
    if kind == "labels":
        lines.append(f"labels: 0=background 1=liver 2=lesion {IGNORE_LABEL}=ignore")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(str(path) + ".hdr", "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(arr).tobytes())


def _parse_header(text: str, path: Path) -> dict:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if ":" not in line:
            raise HeaderError(f"{path}: malformed header line {line!r}")
        key, val = line.split(":", 1)
        fields[key.strip()] = val.strip()
    if fields.get("format") != f"{HEADER_MAGIC} v{HEADER_VERSION}":
        raise HeaderError(f"{path}: unrecognized format {fields.get('format')!r}")
    for req in ("kind", "dtype", "shape", "spacing"):
        if req not in fields:
            raise HeaderError(f"{path}: header missing {req!r}")
    if fields["kind"] not in ("intensity", "labels"):
        raise HeaderError(f"{path}: bad kind {fields['kind']!r}")
    if fields["dtype"] not in _DTYPES:
        raise HeaderError(f"{path}: bad dtype {fields['dtype']!r}")
    try:
        shape = tuple(int(t) for t in fields["shape"].split())
        spacing = tuple(float(t) for t in fields["spacing"].split())
    except ValueError as e:
        raise HeaderError(f"{path}: {e}") from e
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise HeaderError(f"{path}: bad shape {shape}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise HeaderError(f"{path}: bad spacing {spacing}")
    fields["shape"] = shape
    fields["spacing"] = spacing
    return fields


def read_volume(path: str | os.PathLike) -> Volume | LabelMask:
    """Read a volume written by :func:`write_volume`. Bit-exact round trip."""
    path = Path(path)
    hdr_path = Path(str(path) + ".hdr")
    if not hdr_path.exists():
        raise HeaderError(f"{hdr_path}: header file not found")
    fields = _parse_header(hdr_path.read_text(), hdr_path)
    dtype = np.dtype(_DTYPES[fields["dtype"]])
    shape = fields["shape"]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = path.read_bytes()
    if len(payload) != expected:
        raise PayloadSizeError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if fields["kind"] == "labels":
        return LabelMask(arr.copy(), spacing=fields["spacing"])
    return Volume(arr.copy(), spacing=fields["spacing"])


# --------------------------------------------------------------------------
# Dataset manifest: one text record per study.
# --------------------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"
_MANIFEST_COLUMNS = ("id", "domain", "split", "phases", "paths")


def write_manifest(records: Iterable[dict], root: str | os.PathLike) -> Path:
    """Write manifest rows (id, domain, split, phases, paths) under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    out = root / MANIFEST_NAME
    with open(out, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(_MANIFEST_COLUMNS)
        for rec in records:
            w.writerow([
                rec["id"], rec["domain"], rec["split"],
                ",".join(rec["phases"]), ";".join(rec["paths"]),
            ])
    return out


def read_manifest(root: str | os.PathLike) -> list[dict]:
    root = Path(root)
    path = root / MANIFEST_NAME if root.is_dir() else root
    rows = []
    with open(path, newline="") as f:
        r = csv.reader(f, delimiter="\t")
        header = next(r)
        if tuple(header) != _MANIFEST_COLUMNS:
            raise VolumeIOError(f"{path}: unexpected manifest columns {header}")
        for rec in r:
            rows.append({
                "id": rec[0], "domain": rec[1], "split": rec[2],
                "phases": tuple(p for p in rec[3].split(",") if p),
                "paths": tuple(p for p in rec[4].split(";") if p),
            })
    return rows
