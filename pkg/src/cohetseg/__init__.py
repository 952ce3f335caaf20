"""Co-heterogeneous segmentation of multi-phase CT volumes.

A semi-supervised pipeline that pools single-phase labeled volumes with
unlabeled multi-phase studies: a deeply supervised 2D backbone is widened
into a phase-fusion network trained jointly over phase subsets, aligned
across domains with an output-space adversary, and refined with pseudo
labels mined from predicted interior holes.
"""

from .errors import ConfigError, TrainingDivergedError
from .phases import PHASES, canonical_phases, view_combinations
from .volume_io import IGNORE_LABEL, LabelMask, Study, Volume, read_volume, write_volume

__all__ = [
    "PHASES",
    "IGNORE_LABEL",
    "ConfigError",
    "TrainingDivergedError",
    "LabelMask",
    "Study",
    "Volume",
    "canonical_phases",
    "read_volume",
    "view_combinations",
    "write_volume",
]

__version__ = "0.1.0"
