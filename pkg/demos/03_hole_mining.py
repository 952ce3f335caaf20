"""
Mining segmentation holes as free pseudo labels.

A liver prediction with an enclosed cavity is almost always wrong: livers
do not contain air pockets, but treated lesions (necrotic cores after
TACE) look different enough that an unadapted model carves them out.
Those cavities are found with plain 3D connected components and turned
into training targets: lesion inside the hole, ignore everywhere else.

The demo builds a phantom prediction with three defects and shows which
ones the miner keeps.
"""

import numpy as np

from cohetseg.pseudolabel import extract_holes, holes_to_pseudo_mask
from cohetseg.volume_io import IGNORE_LABEL

# A solid organ blob, 28^3.
region = np.zeros((28, 28, 28), dtype=bool)
region[3:25, 3:25, 3:25] = True

# Defect 1: a real cavity, 6x6x6 = 216 voxels, fully enclosed. Keep.
region[8:14, 8:14, 8:14] = False

# Defect 2: a tiny pocket, 3x3x3 = 27 voxels. Too small to trust --
# speckle this size shows up from noise alone. Reject (threshold is
# strictly more than 100 voxels).
region[18:21, 18:21, 18:21] = False

# Defect 3: a tunnel to the outside world, large but touching the
# border. Not enclosed, so it is ambient background, not a hole. Reject.
region[22:28, 5:11, 5:11] = False

holes = extract_holes(region)
print("region voxels:   ", int(region.sum()))
print("hole voxels kept:", int(holes.sum()), "(expected 216)")

# The kept component is exactly defect 1:
expected = np.zeros_like(region)
expected[8:14, 8:14, 8:14] = True
print("kept == enclosed 6x6x6 cavity:", bool(np.array_equal(holes, expected)))

# Lower the size threshold and the small pocket appears too.
print("kept voxels with min_size=20:", int(extract_holes(region, min_size=20).sum()))

# The pseudo mask trains only inside holes; everything else is IGNORE so
# the finetune cannot unlearn the rest of the organ.
pseudo = holes_to_pseudo_mask(holes, spacing=(2.0, 1.0, 1.0))
vals, counts = np.unique(pseudo.labels, return_counts=True)
print("pseudo-mask label histogram:",
      {int(v): int(c) for v, c in zip(vals, counts)},
      f"(2 = lesion, {IGNORE_LABEL} = ignore)")
