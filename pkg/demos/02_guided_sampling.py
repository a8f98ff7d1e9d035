"""Guided sampling: filling modulation tensors from a per-class bank.

The parameter bank is a (num_classes x channels) table. Guided sampling
gathers, for every pixel, the row of that pixel's class - so the dense
modulation maps are piecewise constant over semantic regions, and the
backward pass scatters pixel gradients back into the rows.
"""

import numpy as np

from cladelab import ParamBank, SegmentationMask, Tape, Tensor, backward, guided_sample
from cladelab.tensor import mul, tsum

bank = ParamBank.create(num_classes=3, channels=2)
bank.gamma.data[:] = [[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]]

labels = np.array([[0, 0, 1],
                   [2, 1, 1],
                   [2, 2, 0]], np.int32)
mask = SegmentationMask(labels, 3)

gamma, beta = guided_sample(mask, bank)
print("mask:\n", labels)
print("gamma channel 0 (row of each pixel's class):\n", gamma.data[0, 0])
print("gamma channel 1:\n", gamma.data[0, 1])

# the modulation at a pixel depends on that pixel's label alone: permuting
# the mask permutes the sampled maps identically
rng = np.random.default_rng(1)
perm = rng.permutation(9)
permuted = labels.reshape(-1)[perm].reshape(3, 3)
g2, _ = guided_sample(SegmentationMask(permuted, 3), bank)
same = np.array_equal(gamma.data[0].reshape(2, -1)[:, perm].reshape(2, 3, 3), g2.data[0])
print("\npermutation equivariance holds:", same)

# gradients: each class row accumulates the sum of its pixels' gradients
weights = np.arange(18, dtype=np.float32).reshape(1, 2, 3, 3)
with Tape() as tape:
    g, _ = guided_sample(mask, bank)
    backward(tape, tsum(mul(g, Tensor(weights))))
print("\nupstream weights channel 0:\n", weights[0, 0])
print("bank gradient (per class, per channel):\n", bank.gamma.grad)
for cls in range(3):
    sel = labels == cls
    print(f"  class {cls}: sum of its pixels' weights = "
          f"{weights[0, :, sel].sum(axis=0)}  -> matches row {cls}")
