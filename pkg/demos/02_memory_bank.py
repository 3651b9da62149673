"""
The prototype memory bank and its loss-driven update
====================================================

The bank stores k clusters of M feature vectors ("similarity memory priors")
plus one representative core per cluster. Training replaces the K
lowest-weight slots of each cluster with the K highest-weight fresh features,
and K itself follows the epoch-to-epoch loss difference: improvement shrinks
the budget, regression grows it, a clamp keeps it away from the extremes.
"""

import numpy as np

from memseg.memory import PrototypeMemoryBank
from memseg.train import simulate_k

rng = np.random.default_rng(7)

# Three well-separated blobs of 8-dim features stand in for token clusters.
centers = rng.normal(scale=4.0, size=(3, 8))
tokens = np.vstack([c + rng.normal(scale=0.3, size=(40, 8)) for c in centers])

bank = PrototypeMemoryBank(k=3, slots=8, channels=8, seed=0)
print("clamp range for M=8:", bank.clamp_range())
print("initialized:", bank.initialized)

# K-means over the first training batch fills the slots and sets the cores.
bank.initialize_from(tokens)
print("after init: initialized=%s k_current=%d" % (bank.initialized,
                                                   bank.k_current))
print("core-to-center match (cosine):")
for i in range(3):
    sims = [float(np.dot(bank.cores[i], c)
                  / (np.linalg.norm(bank.cores[i]) * np.linalg.norm(c)))
            for c in centers]
    print("  core %d best matches blob %d (%.3f)"
          % (i, int(np.argmax(sims)), max(sims)))

# Fresh queries route to clusters by cosine similarity against the cores.
fresh = centers[1] + rng.normal(scale=0.3, size=(5, 8))
assign = bank.assign(fresh)
print("five blob-1 queries land in cluster:", assign.labels.tolist())

# The budget rule, driven by a loss pair. Previous loss 0.9 ...
for curr, story in [(0.7, "improved"), (0.9, "flat"), (1.1, "regressed")]:
    k = bank.update_budget(0.9, curr)
    print("loss 0.9 -> %.1f (%s): replace K=%d of %d slots"
          % (curr, story, k, bank.slots))

# One epoch of the real cadence: advance_epoch records the loss and fixes K,
# then apply_update performs the weighted replacement per cluster.
k = bank.advance_epoch(0.9)      # first epoch: no previous loss, K = M/2
print("epoch-1 K:", k)
outputs = [centers[i] + rng.normal(scale=0.3, size=(12, 8)) for i in range(3)]
report = bank.apply_update(outputs, k)
print("replaced slot indices per cluster:", [r.tolist() if hasattr(r, 'tolist')
                                             else list(r)
                                             for r in report.replaced])
print("clusters skipped (no tokens):", report.skipped)

# simulate-k replays a whole loss trajectory offline; the same curve is what
# the training loop logs (M=32 here, clamp [8,24]). Sharp improvement pushes
# K below M/2, a plateau parks it at exactly M/2, and a regression raises it.
losses = [2.0, 1.2, 0.7, 0.5, 0.45, 0.45, 0.45, 0.9, 0.5, 0.45]
print("loss trajectory:", ["%.2f" % l for l in losses])
print("K trajectory:   ", simulate_k(losses, slots=32))
