"""
The agreement loss on unlabeled studies.

Different views of the same study must predict the same anatomy. The
training signal is the generalized Jensen-Shannon divergence: average
per-pixel KL of each view's probability map from the per-pixel mean
consensus. No labels involved.

    PART I  - basic properties on random probability maps
    PART II - minimizing the loss actually pulls disagreeing maps together
"""

import itertools

import numpy as np
import torch

from cohetseg.consistency import consensus, jsd_loss

rng = np.random.default_rng(0)


def random_maps(k, sharp=1.5):
    logits = torch.from_numpy(rng.normal(0, sharp, size=(k, 1, 3, 24, 24)))
    return [torch.softmax(logits[i], dim=1) for i in range(k)]


# PART I ---------------------------------------------------------------

preds = random_maps(4)
print("JSD of 4 disagreeing maps:", float(jsd_loss(preds)))
print("JSD of 4 identical maps:  ", float(jsd_loss([preds[0]] * 4)))

# The loss is a function of the *set* of views. Reductions are done in
# value-sorted order, so even the floating-point result ignores how the
# list happens to be ordered:
vals = {float(jsd_loss([preds[i] for i in p]))
        for p in itertools.permutations(range(4))}
print("distinct loss values over all 24 orderings:", len(vals))

# Upper bound: k maximally disagreeing one-hot maps give log k.
onehots = []
for c in range(3):
    m = torch.zeros(1, 3, 8, 8)
    m[:, c] = 1.0
    onehots.append(m)
print("3 disjoint one-hot maps -> JSD =", float(jsd_loss(onehots)),
      "(log 3 =", float(np.log(3)), ")")


# PART II --------------------------------------------------------------
# Gradient descent on the loss alone. Two "views" start disagreeing;
# a hundred steps later they have met somewhere in the middle. This is
# the force that drags the weak phases toward the strong ones during
# adaptation (there it acts through shared weights, not free logits).

la = torch.randn(1, 3, 16, 16, requires_grad=True)
lb = torch.randn(1, 3, 16, 16, requires_grad=True)
opt = torch.optim.Adam([la, lb], lr=0.05)

# (once the maps agree, the float32 loss sits within ~1e-9 of zero and
# the sign of the printed value is just rounding noise)
for step in range(201):
    pa, pb = torch.softmax(la, dim=1), torch.softmax(lb, dim=1)
    loss = jsd_loss([pa, pb])
    if step % 50 == 0:
        agree = float((pa.argmax(1) == pb.argmax(1)).float().mean())
        print(f"step {step:3d}  jsd {float(loss.detach()):.5f}  "
              f"argmax agreement {agree:.3f}")
    opt.zero_grad()
    loss.backward()
    opt.step()

m = consensus([torch.softmax(la, dim=1), torch.softmax(lb, dim=1)])
print("final consensus entropy:",
      float((-m * torch.log(m.clamp_min(1e-12))).sum(dim=1).mean()))
