"""Gradient-subspace projectors and the subspace refresh schedule.

A projector maps a full m x n gradient into a rank-r space and back.  The
side is chosen by shape: left (columns of U, projector m x r) when
m <= n, right (columns of V, projector n x r) when m > n, so the moment
matrices always live on the long axis.  Projectors are refreshed every
`update_freq` steps from the current gradient and reused in between.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import matcore
from .errors import DimensionError, ParameterError
from .matcore import Rng

METHODS = (
    "spectral",
    "randomized_spectral",
    "random_gaussian",
    "quantized_spectral",
    "identity",
)

# CLI / config shorthands
METHOD_ALIASES = {
    "spectral": "spectral",
    "randomized": "randomized_spectral",
    "randomized_spectral": "randomized_spectral",
    "random": "random_gaussian",
    "random_gaussian": "random_gaussian",
    "quant8": "quantized_spectral",
    "quant4": "quantized_spectral",
    "quantized_spectral": "quantized_spectral",
    "identity": "identity",
}


def resolve_method(name: str) -> tuple[str, int | None]:
    """Map a config shorthand to (method, bits override)."""
    key = name.strip().lower()
    if key not in METHOD_ALIASES:
        raise ParameterError(f"unknown projection method '{name}'")
    bits = {"quant8": 8, "quant4": 4}.get(key)
    return METHOD_ALIASES[key], bits


@dataclass
class ProjectionConfig:
    """Hyperparameters of the low-rank projection.

    alpha scales the back-projected update and acts as a fractional
    learning rate; update_freq is the number of steps a projector is
    reused before being recomputed from the current gradient.
    """

    rank: int
    update_freq: int = 500
    method: str = "spectral"
    alpha: float = 0.125
    oversample: int = 8
    power_iters: int = 1
    bits: int = 8
    reset_moments_on_refresh: bool = False

    def __post_init__(self):
        if self.rank < 1:
            raise ParameterError(f"rank must be >= 1, got {self.rank}")
        if self.update_freq < 1:
            raise ParameterError(f"update_freq must be >= 1, got {self.update_freq}")
        # alpha == 0 is allowed: it freezes the weights while the moments
        # keep advancing, which is useful as a test probe.
        if self.alpha < 0.0:
            raise ParameterError(f"alpha must be >= 0, got {self.alpha}")
        if self.bits not in (4, 8):
            raise ParameterError(f"bits must be 4 or 8, got {self.bits}")
        if self.method not in METHODS:
            raise ParameterError(f"unknown projection method '{self.method}'")
        if self.oversample < 0:
            raise ParameterError(f"oversample must be >= 0, got {self.oversample}")
        if self.power_iters < 0:
            raise ParameterError(f"power_iters must be >= 0, got {self.power_iters}")


@dataclass
class QuantizedMatrix:
    """Per-column symmetric absmax quantization of a matrix.

    codes are signed integers in [-(2**(bits-1)-1), 2**(bits-1)-1]; each
    column stores one float64 scale equal to its absolute maximum, so the
    dequantized column absmax reproduces the scale within one step.
    """

    codes: np.ndarray  # int8, rows x cols
    scales: np.ndarray  # float64, one per column
    bits: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape


@dataclass(frozen=True)
class ProjectorState:
    """An immutable projector: refreshing produces a new state."""

    p: np.ndarray | QuantizedMatrix
    side: str  # "left" | "right"
    rank: int
    method: str
    last_refresh_step: int

    def dense(self) -> np.ndarray:
        """The projection matrix as a dense array (dequantizing if needed)."""
        if isinstance(self.p, QuantizedMatrix):
            return dequantize_projector(self.p)
        return self.p


def should_refresh(step: int, cfg: ProjectionConfig) -> bool:
    """True iff the subspace is recomputed at `step` (step 0 always is:
    no projector exists before the first gradient)."""
    if step < 0:
        raise ParameterError(f"step must be >= 0, got {step}")
    return step % cfg.update_freq == 0


def quantize_projector(p: np.ndarray, bits: int) -> QuantizedMatrix:
    """Per-column symmetric absmax quantization to `bits` (4 or 8).

    code = round(x / col_absmax * (2**(bits-1) - 1)); an all-zero column
    gets scale 0 and codes 0, which round-trips exactly.
    """
    if bits not in (4, 8):
        raise ParameterError(f"bits must be 4 or 8, got {bits}")
    if p.ndim != 2:
        raise DimensionError("quantize_projector expects a 2-D matrix")
    levels = 2 ** (bits - 1) - 1
    scales = np.abs(p).max(axis=0)
    safe = np.where(scales > 0.0, scales, 1.0)
    codes = np.round(p / safe * levels)
    codes = np.clip(codes, -levels, levels).astype(np.int8)
    codes[:, scales == 0.0] = 0
    return QuantizedMatrix(codes=codes, scales=scales, bits=bits)


def dequantize_projector(q: QuantizedMatrix) -> np.ndarray:
    levels = 2 ** (q.bits - 1) - 1
    return q.codes.astype(np.float64) * (q.scales / levels)


def _pick_side(m: int, n: int) -> str:
    return "left" if m <= n else "right"


def compute_projector(
    g: np.ndarray, cfg: ProjectionConfig, step: int, rng: Rng | None = None
) -> ProjectorState:
    """Build a fresh projector for gradient `g` at `step`.

    spectral / randomized_spectral take the top-r singular vectors of g
    (exact or Halko); random_gaussian orthonormalizes a seeded Gaussian
    draw and ignores g entirely; quantized_spectral quantizes the spectral
    projector per column; identity requires rank == min(m, n) and reduces
    the projection to a no-op.
    """
    if g.ndim != 2:
        raise DimensionError("compute_projector expects a 2-D gradient")
    m, n = g.shape
    small = min(m, n)
    side = _pick_side(m, n)
    r = cfg.rank
    if cfg.method == "identity":
        if r != small:
            raise ParameterError(
                f"identity projector requires rank == min(m, n) = {small}, got {r}"
            )
        p: np.ndarray | QuantizedMatrix = np.eye(small)
        return ProjectorState(p=p, side=side, rank=r, method=cfg.method, last_refresh_step=step)
    if r > small:
        raise ParameterError(f"rank {r} exceeds min(m, n) = {small}")

    if cfg.method in ("spectral", "quantized_spectral"):
        res = matcore.svd_full(g)
        basis = res.u[:, :r] if side == "left" else res.v[:, :r]
        if cfg.method == "quantized_spectral":
            p = quantize_projector(basis, cfg.bits)
        else:
            p = basis
    elif cfg.method == "randomized_spectral":
        if rng is None:
            raise ParameterError("randomized_spectral requires an Rng")
        # Oversampling is clamped so small layers stay usable with the
        # library default of 8.
        oversample = min(cfg.oversample, small - r)
        res = matcore.randomized_svd(g, r, oversample, cfg.power_iters, rng)
        p = res.u[:, :r] if side == "left" else res.v[:, :r]
    elif cfg.method == "random_gaussian":
        if rng is None:
            raise ParameterError("random_gaussian requires an Rng")
        dim = m if side == "left" else n
        p = matcore.qr_thin(matcore.gaussian(rng, dim, r))[0]
    else:  # pragma: no cover - guarded by ProjectionConfig validation
        raise ParameterError(f"unknown projection method '{cfg.method}'")
    return ProjectorState(p=p, side=side, rank=r, method=cfg.method, last_refresh_step=step)


def project(ps: ProjectorState, g: np.ndarray) -> np.ndarray:
    """Project a full gradient into the compact space.

    Left: r x n result p.T @ g; right: m x r result g @ p.  Quantized
    projectors are dequantized on the fly.
    """
    p = ps.dense()
    if ps.side == "left":
        if g.shape[0] != p.shape[0]:
            raise DimensionError(
                f"left projector is {p.shape[0]}x{p.shape[1]} but gradient has {g.shape[0]} rows"
            )
        return matcore.matmul(p.T, g)
    if g.shape[1] != p.shape[0]:
        raise DimensionError(
            f"right projector is {p.shape[0]}x{p.shape[1]} but gradient has {g.shape[1]} cols"
        )
    return matcore.matmul(g, p)


def back_project(ps: ProjectorState, n_lowrank: np.ndarray, alpha: float) -> np.ndarray:
    """Map a low-rank update back to full shape, scaled by alpha."""
    p = ps.dense()
    if ps.side == "left":
        if n_lowrank.shape[0] != p.shape[1]:
            raise DimensionError(
                f"low-rank update has {n_lowrank.shape[0]} rows, expected {p.shape[1]}"
            )
        return alpha * matcore.matmul(p, n_lowrank)
    if n_lowrank.shape[1] != p.shape[1]:
        raise DimensionError(
            f"low-rank update has {n_lowrank.shape[1]} cols, expected {p.shape[1]}"
        )
    return alpha * matcore.matmul(n_lowrank, p.T)
