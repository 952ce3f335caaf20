"""
Phase subsets as views, and what the (mean || variance) fusion buys.

A four-phase CT study can be fed to the network through any nonempty
subset of its phases: each phase has its own stem for the first two
stages, the stem features are fused position-wise into mean and variance
channels, and a shared trunk finishes the job. This demo walks through:

    PART I   - the 2^n - 1 views of a study and their canonical order
    PART II  - a fusion net initialized from a pretrained single-phase
               net reproduces it exactly on every singleton view
    PART III - dropping phases at inference degrades gracefully instead
               of requiring a separate model per phase combination
"""

import torch

from cohetseg.backbone import BackboneConfig, PhnnNet, phnn_forward
from cohetseg.fusion import enumerate_views, hetero_forward
from cohetseg.phases import PHASES
from cohetseg.trainer import init_cohetero_from_pretrained

torch.manual_seed(0)


# PART I ---------------------------------------------------------------
# Views are enumerated deterministically: size-major, then by the
# canonical phase order NC < A < V < D.

print("views of a full four-phase study:")
for view in enumerate_views(PHASES):
    print("   ", "+".join(view))
print("count:", len(enumerate_views(PHASES)), "(= 2^4 - 1)")

incomplete = ("NC", "V")  # a study that only has two phases
print("\nviews of an NC+V study:", enumerate_views(incomplete))


# PART II --------------------------------------------------------------
# The fusion net is not trained from scratch. Its stems copy the
# pretrained stages 1-2, the trunk copies stages 3-5, and the weights
# that read the variance channels start at zero. A single phase has
# variance exactly zero, so every singleton view starts out computing
# exactly what the pretrained net computed.

pre = PhnnNet(BackboneConfig())
net = init_cohetero_from_pretrained(pre)

x = torch.randn(3, 1, 32, 32)  # a small batch of slices
with torch.no_grad():
    ref = phnn_forward(pre, x).final
    for phase in PHASES:
        single = hetero_forward(net, {phase: x}, (phase,)).final
        print(f"max |{phase}-singleton - pretrained| =",
              float((single - ref).abs().max()))


# PART III -------------------------------------------------------------
# At inference the same weights serve every subset. Here the phases are
# noisy copies of one underlying slice; more phases -> a steadier
# consensus, and nothing special happens when one goes missing.

base = torch.randn(2, 1, 32, 32)
slices = {p: base + 0.3 * torch.randn_like(base) for p in PHASES}

with torch.no_grad():
    full = hetero_forward(net, slices, PHASES).final
    print("\nprediction shape from all four phases:", tuple(full.shape))
    for view in [("V",), ("NC", "V"), ("NC", "A", "V"), PHASES]:
        pred = hetero_forward(net, slices, view).final
        drift = float((pred - full).abs().max())
        print(f"view {'+'.join(view):11s} max drift from full-view pred: {drift:.4f}")
