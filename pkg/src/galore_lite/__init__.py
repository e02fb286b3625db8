"""galore_lite: desk-scale GaLore-style low-rank training toolkit.

Subpackages:
  matcore    deterministic dense linear algebra (QR, SVD, randomized SVD)
  projector  gradient-subspace projectors and the refresh schedule
  optim      low-rank Adam, full-rank Adam, blockwise 8-bit moments
  tensor_ext order-3 tensor bridge via mode unfolding
  memmodel   analytic memory accounting per layer/model/strategy
  shardsim   deterministic in-process DDP/FSDP training simulation
  harness    toy models, synthetic data, LR schedule, training loops
  cli        command-line entry point
"""

__version__ = "0.1.0"
