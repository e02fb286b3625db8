"""Order-3 tensor bridge: apply the low-rank machinery via mode unfolding.

A mode-k unfolding puts mode k on the rows and flattens the remaining
modes in their original (row-major) order, so fold(unfold(t)) is an exact
round trip for every mode.  The tensor step simply unfolds the gradient,
runs the matrix step, and folds the weight update back.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError
from .matcore import Rng
from .optim import AdamHyper, GaLoreAdamState, galore_step
from .projector import ProjectionConfig, ProjectorState

MODES = (1, 2, 3)


def as_tensor3(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if arr.ndim != 3:
        raise DimensionError(f"expected an order-3 tensor, got ndim={arr.ndim}")
    return arr


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-k matricization: d_mode x (product of the other dims)."""
    if t.ndim != 3:
        raise DimensionError(f"unfold expects an order-3 tensor, got ndim={t.ndim}")
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode}")
    axis = mode - 1
    moved = np.moveaxis(t, axis, 0)
    return np.ascontiguousarray(moved.reshape(t.shape[axis], -1))


def fold(m: np.ndarray, dims: tuple[int, int, int], mode: int) -> np.ndarray:
    """Inverse of unfold for the given original dims."""
    if m.ndim != 2:
        raise DimensionError("fold expects a 2-D matrix")
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode}")
    if len(dims) != 3:
        raise DimensionError(f"dims must have length 3, got {dims}")
    axis = mode - 1
    rest = [dims[i] for i in range(3) if i != axis]
    if m.shape != (dims[axis], rest[0] * rest[1]):
        raise DimensionError(
            f"matrix shape {m.shape} does not match mode-{mode} unfolding of dims {dims}"
        )
    moved = m.reshape(dims[axis], *rest)
    return np.ascontiguousarray(np.moveaxis(moved, 0, axis))


def galore_step_tensor3(
    w: np.ndarray,
    g: np.ndarray,
    mode: int,
    ps: ProjectorState | None,
    st: GaLoreAdamState,
    hyper: AdamHyper,
    cfg: ProjectionConfig,
    step: int,
    rng: Rng | None = None,
) -> tuple[np.ndarray, ProjectorState, GaLoreAdamState]:
    """GaLore step on an order-3 gradient via its mode-k unfolding."""
    if w.shape != g.shape:
        raise DimensionError(f"weight {w.shape} and gradient {g.shape} shapes differ")
    dims = tuple(w.shape)
    w2 = unfold(w, mode)
    g2 = unfold(g, mode)
    w2_new, ps_new, st_new = galore_step(w2, g2, ps, st, hyper, cfg, step, rng)
    return fold(w2_new, dims, mode), ps_new, st_new
