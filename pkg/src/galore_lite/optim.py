"""Adam in the low-rank space, the full-rank baseline, and 8-bit moments.

Sign convention: all entry points take the raw loss gradient dL/dW and
apply W <- W - lr * update.  (Equivalently the classic statement of the
algorithm feeds the negated gradient and adds; Adam's direction is odd in
its input, so the two forms produce identical iterates.)

The low-rank update and the full-rank baseline share one moment kernel,
so a GaLore step through an identity projector with alpha = 1 reproduces
the full-rank Adam step bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, NumericError, ParameterError
from .matcore import Rng
from .projector import (
    ProjectionConfig,
    ProjectorState,
    back_project,
    compute_projector,
    project,
    should_refresh,
)

STORAGE_FULL = "full64"
STORAGE_QUANT8 = "quant8"
DEFAULT_BLOCK_SIZE = 256


@dataclass
class AdamHyper:
    """Adam hyperparameters plus the bias-correction switch.

    With bias_correction off the moments are used raw, matching the
    uncorrected formulation; default is on.  weight_decay is decoupled
    and defaults to 0 (no decay).
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = True
    weight_decay: float = 0.0

    def __post_init__(self):
        # lr == 0 is legal so warmup schedules can take a first step that
        # advances the moments without moving the weights.
        if self.lr < 0.0:
            raise ParameterError(f"lr must be >= 0, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ParameterError("betas must lie in [0, 1)")
        if not self.eps > 0.0:
            raise ParameterError(f"eps must be > 0, got {self.eps}")
        if self.weight_decay < 0.0:
            raise ParameterError("weight_decay must be >= 0")


@dataclass
class QuantizedMoment:
    """Blockwise absmax quantization of a flattened moment tensor.

    Blocks of `block_size` consecutive entries share one float64 scale
    (the block's absolute maximum); the last block may be partial.  The
    first moment uses signed 8-bit codes in [-127, 127], the second
    (non-negative) moment unsigned codes in [0, 255].
    """

    codes: np.ndarray  # int8 (signed) or uint8 (unsigned), flat
    block_scales: np.ndarray  # float64, one per block
    shape: tuple[int, ...]
    signed: bool
    block_size: int


def quantize_moment(x: np.ndarray, block_size: int = DEFAULT_BLOCK_SIZE, signed: bool = True) -> QuantizedMoment:
    """Blockwise absmax linear quantization to 8 bits.

    The flattened tensor is processed in row-major order; a trailing
    partial block is allowed (it is zero-padded internally, which cannot
    change its absmax).
    """
    if block_size < 1:
        raise ParameterError(f"block_size must be >= 1, got {block_size}")
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    n = flat.size
    n_blocks = -(-n // block_size) if n else 0
    padded = np.zeros(n_blocks * block_size)
    padded[:n] = flat
    blocks = padded.reshape(n_blocks, block_size)
    scales = np.abs(blocks).max(axis=1) if n_blocks else np.zeros(0)
    levels = 127 if signed else 255
    dtype = np.int8 if signed else np.uint8
    safe = np.where(scales > 0.0, scales, 1.0)
    q = np.round(blocks / safe[:, None] * levels)
    q = np.clip(q, -levels if signed else 0, levels)
    q[scales == 0.0, :] = 0
    codes = q.astype(dtype).reshape(-1)[:n]
    return QuantizedMoment(
        codes=codes, block_scales=scales, shape=tuple(x.shape), signed=signed, block_size=block_size
    )


def dequantize_moment(q: QuantizedMoment) -> np.ndarray:
    levels = 127 if q.signed else 255
    n = q.codes.size
    n_blocks = q.block_scales.size
    padded = np.zeros(n_blocks * q.block_size)
    padded[:n] = q.codes.astype(np.float64)
    out = padded.reshape(n_blocks, q.block_size) * (q.block_scales[:, None] / levels)
    return out.reshape(-1)[:n].reshape(q.shape)


@dataclass
class GaLoreAdamState:
    """Moment state for one parameter matrix.

    m and v live in the low-rank space (r x n for a left projector,
    m x r for a right one) or at full shape for the full-rank baseline;
    storage selects float64 arrays or blockwise 8-bit codes.
    """

    m: np.ndarray | QuantizedMoment
    v: np.ndarray | QuantizedMoment
    t: int = 0
    storage: str = STORAGE_FULL
    block_size: int = DEFAULT_BLOCK_SIZE

    def moment_shape(self) -> tuple[int, ...]:
        return tuple(self.m.shape)

    def dense_moments(self) -> tuple[np.ndarray, np.ndarray]:
        m = dequantize_moment(self.m) if isinstance(self.m, QuantizedMoment) else self.m
        v = dequantize_moment(self.v) if isinstance(self.v, QuantizedMoment) else self.v
        return m, v


def init_adam_state(
    shape: tuple[int, ...],
    storage: str = STORAGE_FULL,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> GaLoreAdamState:
    """Zero-initialized moments of the given shape."""
    if storage not in (STORAGE_FULL, STORAGE_QUANT8):
        raise ParameterError(f"unknown moment storage '{storage}'")
    zeros = np.zeros(shape)
    if storage == STORAGE_QUANT8:
        return GaLoreAdamState(
            m=quantize_moment(zeros, block_size, signed=True),
            v=quantize_moment(zeros, block_size, signed=False),
            t=0,
            storage=storage,
            block_size=block_size,
        )
    return GaLoreAdamState(m=zeros, v=zeros.copy(), t=0, storage=storage, block_size=block_size)


def _moment_kernel(m, v, grad, hyper: AdamHyper, t_next: int):
    """One Adam moment update; returns (direction, m_new, v_new)."""
    m_new = hyper.beta1 * m + (1.0 - hyper.beta1) * grad
    v_new = hyper.beta2 * v + (1.0 - hyper.beta2) * (grad * grad)
    if hyper.bias_correction:
        m_hat = m_new / (1.0 - hyper.beta1 ** t_next)
        v_hat = v_new / (1.0 - hyper.beta2 ** t_next)
    else:
        m_hat = m_new
        v_hat = v_new
    direction = m_hat / (np.sqrt(v_hat) + hyper.eps)
    return direction, m_new, v_new


def adam_lowrank_update(
    state: GaLoreAdamState, r_t: np.ndarray, hyper: AdamHyper
) -> tuple[np.ndarray, GaLoreAdamState]:
    """One Adam update on a (low-rank) gradient; returns (n_t, new state).

    Quantized storage is dequantized before and requantized after the
    update; the second moment is stored unsigned so it dequantizes
    non-negative.
    """
    expected = state.moment_shape()
    if tuple(r_t.shape) != tuple(expected):
        raise DimensionError(
            f"gradient shape {tuple(r_t.shape)} does not match moment shape {tuple(expected)}"
        )
    t_next = state.t + 1
    if not np.isfinite(r_t).all():
        raise NumericError(f"non-finite gradient entries at optimizer step {t_next}")
    m, v = state.dense_moments()
    direction, m_new, v_new = _moment_kernel(m, v, r_t, hyper, t_next)
    if state.storage == STORAGE_QUANT8:
        new_state = GaLoreAdamState(
            m=quantize_moment(m_new, state.block_size, signed=True),
            v=quantize_moment(v_new, state.block_size, signed=False),
            t=t_next,
            storage=state.storage,
            block_size=state.block_size,
        )
    else:
        new_state = GaLoreAdamState(
            m=m_new, v=v_new, t=t_next, storage=state.storage, block_size=state.block_size
        )
    return direction, new_state


def _apply_update(w: np.ndarray, update: np.ndarray, hyper: AdamHyper) -> np.ndarray:
    w_new = w - hyper.lr * update
    if hyper.weight_decay != 0.0:
        w_new = w_new - (hyper.lr * hyper.weight_decay) * w
    return w_new


def adam_step(
    w: np.ndarray, g: np.ndarray, state: GaLoreAdamState, hyper: AdamHyper
) -> tuple[np.ndarray, GaLoreAdamState]:
    """Full-rank Adam baseline (float64 or blockwise 8-bit moments)."""
    if w.shape != g.shape:
        raise DimensionError(f"weight {w.shape} and gradient {g.shape} shapes differ")
    direction, new_state = adam_lowrank_update(state, g, hyper)
    return _apply_update(w, direction, hyper), new_state


def galore_step(
    w: np.ndarray,
    g: np.ndarray,
    ps: ProjectorState | None,
    st: GaLoreAdamState,
    hyper: AdamHyper,
    cfg: ProjectionConfig,
    step: int,
    rng: Rng | None = None,
) -> tuple[np.ndarray, ProjectorState, GaLoreAdamState]:
    """One GaLore step: refresh-or-reuse projector, project, Adam in the
    compact space, project back scaled by alpha, apply to the weights.

    `step` must equal the state's step count so the refresh schedule and
    bias correction stay aligned.
    """
    if w.shape != g.shape:
        raise DimensionError(f"weight {w.shape} and gradient {g.shape} shapes differ")
    if step != st.t:
        raise ParameterError(f"step {step} does not match optimizer state t={st.t}")
    if ps is None or should_refresh(step, cfg):
        ps = compute_projector(g, cfg, step, rng)
        if cfg.reset_moments_on_refresh and step > 0:
            st = init_adam_state(st.moment_shape(), st.storage, st.block_size)
            st = replace(st, t=step)
    r_t = project(ps, g)
    n_t, st_new = adam_lowrank_update(st, r_t, hyper)
    update = back_project(ps, n_t, cfg.alpha)
    return _apply_update(w, update, hyper), ps, st_new


def lowrank_moment_shape(m: int, n: int, rank: int) -> tuple[int, int]:
    """Shape of the moments for an m x n parameter at the given rank:
    r x n for a left projector (m <= n), m x r for a right one."""
    return (rank, n) if m <= n else (m, rank)
