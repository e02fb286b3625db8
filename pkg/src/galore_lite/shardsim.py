"""Deterministic in-process simulation of DDP and FSDP training.

Ranks advance in lockstep inside one process; collectives are pure
functions that reduce in fixed rank order 0..world-1, so every schedule
produces bit-identical results and parity against a single-device run can
be asserted at tight tolerances.

Sharding layout: each layer tensor is oriented with its long axis first
(transposed for left-projected layers), zero-padded along that axis to a
multiple of the world size, and split into contiguous row blocks.  In
that layout the low-rank update is the same expression on every rank and
both projection sides:

    R_block = G_block @ P        (project)
    dW_block = alpha * N_block @ P.T   (back-project)

and the moment shards align with the gradient shards row for row.  Padded
rows carry zero gradients, so their moments and updates stay exactly zero
and no masking is needed.

Gradient memory is tracked analytically: the fused per-layer path holds
at most one full layer gradient at a time (high-water = largest layer),
while the accumulate-all DDP path holds all of them (high-water = sum).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, ParameterError, ProtocolError
from .matcore import Rng
from .optim import (
    AdamHyper,
    GaLoreAdamState,
    adam_lowrank_update,
    adam_step,
    galore_step,
    init_adam_state,
    lowrank_moment_shape,
)
from .projector import ProjectionConfig, ProjectorState, compute_projector, should_refresh


@dataclass
class CollectiveRecord:
    """One logged collective: kind is all_reduce, reduce_scatter,
    all_gather, or broadcast; elements counts the logical tensor."""

    step: int
    layer: str
    kind: str
    elements: int


# ---------------------------------------------------------------------------
# collectives (pure functions, fixed rank-order reduction)
# ---------------------------------------------------------------------------

def shard(x: np.ndarray, world: int) -> list[np.ndarray]:
    """Flatten row-major, zero-pad to a multiple of world, split evenly."""
    if world < 1:
        raise ParameterError(f"world must be >= 1, got {world}")
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    chunk = -(-flat.size // world) if flat.size else 0
    padded = np.zeros(chunk * world)
    padded[: flat.size] = flat
    return [padded[k * chunk : (k + 1) * chunk].copy() for k in range(world)]


def unshard(shards: list[np.ndarray], shape: tuple[int, ...]) -> np.ndarray:
    """Invert `shard` given the original shape."""
    flat = np.concatenate([np.asarray(s).reshape(-1) for s in shards])
    size = int(np.prod(shape))
    if flat.size < size:
        raise DimensionError(f"shards hold {flat.size} elements, need {size}")
    return flat[:size].reshape(shape)


def _check_same_shape(xs: list[np.ndarray]) -> None:
    if not xs:
        raise ProtocolError("collective called with no ranks")
    shape = xs[0].shape
    for k, x in enumerate(xs):
        if x.shape != shape:
            raise ProtocolError(
                f"rank {k} holds shape {x.shape}, rank 0 holds {shape}"
            )


def _reduce(xs: list[np.ndarray], average: bool) -> np.ndarray:
    """Sum in fixed rank order 0..world-1, then optionally average."""
    out = xs[0].copy()
    for x in xs[1:]:
        out += x
    if average:
        out /= len(xs)
    return out


def all_reduce(per_rank: list[np.ndarray], average: bool = True) -> list[np.ndarray]:
    """Every rank receives the (averaged) fixed-order sum."""
    _check_same_shape(per_rank)
    total = _reduce(per_rank, average)
    return [total.copy() for _ in per_rank]


def reduce_scatter(per_rank: list[np.ndarray], average: bool = True) -> list[np.ndarray]:
    """Fixed-order sum, then each rank receives its flat shard."""
    _check_same_shape(per_rank)
    total = _reduce(per_rank, average)
    return shard(total, len(per_rank))


def all_gather(shards: list[np.ndarray], shape: tuple[int, ...]) -> list[np.ndarray]:
    """Every rank receives the reassembled tensor."""
    full = unshard(shards, shape)
    return [full.copy() for _ in shards]


def broadcast(x: np.ndarray, world: int) -> list[np.ndarray]:
    """Every rank receives a copy of rank 0's tensor."""
    if world < 1:
        raise ParameterError(f"world must be >= 1, got {world}")
    return [np.array(x, copy=True) for _ in range(world)]


# ---------------------------------------------------------------------------
# sharded layer layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerLayout:
    """How one m x n parameter is oriented, padded, and split."""

    name: str
    m: int
    n: int
    world: int

    @property
    def side(self) -> str:
        return "left" if self.m <= self.n else "right"

    @property
    def long(self) -> int:
        return max(self.m, self.n)

    @property
    def short(self) -> int:
        return min(self.m, self.n)

    @property
    def padded_long(self) -> int:
        return -(-self.long // self.world) * self.world

    @property
    def block(self) -> int:
        return self.padded_long // self.world

    def orient(self, full: np.ndarray) -> np.ndarray:
        """Long-axis-first view of a full m x n tensor (copy)."""
        if full.shape != (self.m, self.n):
            raise DimensionError(f"{self.name}: expected {(self.m, self.n)}, got {full.shape}")
        return np.ascontiguousarray(full.T if self.side == "left" else full)

    def deorient(self, oriented: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(oriented.T if self.side == "left" else oriented)

    def pad(self, oriented: np.ndarray) -> np.ndarray:
        out = np.zeros((self.padded_long, oriented.shape[1]))
        out[: self.long] = oriented
        return out

    def to_shards(self, full: np.ndarray) -> list[np.ndarray]:
        """Split a full tensor into per-rank oriented row blocks via the
        generic flat shard (padding makes the split land on row bounds)."""
        padded = self.pad(self.orient(full))
        flats = shard(padded, self.world)
        cols = padded.shape[1]
        return [f.reshape(self.block, cols) for f in flats]

    def from_shards(self, blocks: list[np.ndarray]) -> np.ndarray:
        stacked = np.vstack(blocks)[: self.long]
        return self.deorient(stacked)


# ---------------------------------------------------------------------------
# rank state
# ---------------------------------------------------------------------------

@dataclass
class RankContext:
    """One simulated data-parallel rank."""

    rank: int
    world: int
    mode: str  # "ddp" | "fsdp"
    step: int = 0
    params: dict[str, np.ndarray] = field(default_factory=dict)  # ddp: full replicas
    param_shards: dict[str, np.ndarray] = field(default_factory=dict)  # fsdp: oriented blocks
    opt: dict[str, GaLoreAdamState] = field(default_factory=dict)
    projectors: dict[str, ProjectorState | None] = field(default_factory=dict)
    proj_rngs: dict[str, Rng] = field(default_factory=dict)
    log: list[CollectiveRecord] = field(default_factory=list)
    grad_highwater_elems: int = 0


def projector_rngs(seed: int, names: list[str]) -> dict[str, Rng]:
    """One independent projector stream per layer, derived from `seed`.

    Keyed by layer position, not draw order, so every execution schedule
    (single device, DDP replicas, FSDP rank 0) consumes identical values.
    """
    root = Rng(seed)
    return {name: root.spawn(1000 + i) for i, name in enumerate(names)}


def _log_all(ranks: list[RankContext], step: int, layer: str, kind: str, elements: int) -> None:
    for ctx in ranks:
        ctx.log.append(CollectiveRecord(step=step, layer=layer, kind=kind, elements=elements))


def _check_lockstep(ranks: list[RankContext]) -> int:
    steps = {ctx.step for ctx in ranks}
    if len(steps) != 1:
        raise ProtocolError(f"ranks out of lockstep: steps {sorted(steps)}")
    return ranks[0].step


def _galore_shapes(layout: LayerLayout, cfg: ProjectionConfig) -> tuple[int, int]:
    """Moment block shape (block x rank) for a sharded layer."""
    rank = cfg.rank if cfg.method != "identity" else layout.short
    return layout.block, rank


def make_fsdp_ranks(
    params: dict[str, np.ndarray],
    world: int,
    cfgs: dict[str, ProjectionConfig] | None,
    strategy: str = "galore",
    storage: str = "full64",
    proj_seed: int = 0,
) -> tuple[list[RankContext], dict[str, LayerLayout]]:
    """Shard the given parameters across `world` simulated ranks."""
    layouts = {
        name: LayerLayout(name=name, m=w.shape[0], n=w.shape[1], world=world)
        for name, w in params.items()
    }
    names = list(params)
    ranks = [
        RankContext(rank=k, world=world, mode="fsdp", proj_rngs=projector_rngs(proj_seed, names))
        for k in range(world)
    ]
    for name, w in params.items():
        layout = layouts[name]
        blocks = layout.to_shards(w)
        for k, ctx in enumerate(ranks):
            ctx.param_shards[name] = blocks[k]
            ctx.projectors[name] = None
            if strategy == "galore":
                shape = _galore_shapes(layout, cfgs[name])
            else:
                shape = (layout.block, layout.short)
            ctx.opt[name] = init_adam_state(shape, storage)
    return ranks, layouts


def make_ddp_ranks(
    params: dict[str, np.ndarray],
    world: int,
    cfgs: dict[str, ProjectionConfig] | None,
    strategy: str = "galore",
    storage: str = "full64",
    proj_seed: int = 0,
) -> list[RankContext]:
    """Replicate the given parameters across `world` simulated ranks.

    Every rank gets its own projector streams seeded identically, so the
    replicas draw the same values and stay bit-identical.
    """
    names = list(params)
    ranks = [
        RankContext(rank=k, world=world, mode="ddp", proj_rngs=projector_rngs(proj_seed, names))
        for k in range(world)
    ]
    for name, w in params.items():
        m, n = w.shape
        for ctx in ranks:
            ctx.params[name] = w.copy()
            ctx.projectors[name] = None
            if strategy == "galore":
                cfg = cfgs[name]
                r = cfg.rank if cfg.method != "identity" else min(m, n)
                ctx.opt[name] = init_adam_state(lowrank_moment_shape(m, n, r), storage)
            else:
                ctx.opt[name] = init_adam_state((m, n), storage)
    return ranks


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------

def fsdp_galore_train_step(
    ranks: list[RankContext],
    layouts: dict[str, LayerLayout],
    batches: list,
    grad_fn,
    hyper: AdamHyper,
    cfgs: dict[str, ProjectionConfig] | None,
    strategy: str = "galore",
    layer_order: list[str] | None = None,
) -> None:
    """One fused per-layer FSDP training step, in place.

    Per layer, in reverse (backward) order: every rank contributes its
    local full-shape gradient, the gradients are reduce-scattered into
    averaged shards, the projector is recomputed from the gathered global
    gradient on refresh steps and broadcast, and each rank updates its own
    weight and moment shards with the replicated projector.  The local
    gradient is considered discarded after the layer update, so the
    per-rank gradient high-water mark is the largest single layer.
    """
    step = _check_lockstep(ranks)
    world = len(ranks)
    if world < 1 or len(batches) != world:
        raise ProtocolError(f"need one batch per rank, got {len(batches)} for world {world}")
    order = layer_order or list(layouts)

    # forward needs full weights: all-gather each layer's shards
    full_params = {}
    for name in order:
        layout = layouts[name]
        full_params[name] = layout.from_shards([ctx.param_shards[name] for ctx in ranks])
        _log_all(ranks, step, name, "all_gather", layout.m * layout.n)

    per_rank_grads = [grad_fn(full_params, batches[k]) for k in range(world)]

    max_layer = max(layout.m * layout.n for layout in layouts.values())
    for ctx in ranks:
        ctx.grad_highwater_elems = max(ctx.grad_highwater_elems, max_layer)

    for name in reversed(order):
        layout = layouts[name]
        cfg = cfgs[name] if strategy == "galore" else None
        oriented = [layout.pad(layout.orient(per_rank_grads[k][name])) for k in range(world)]
        _log_all(ranks, step, name, "reduce_scatter", layout.m * layout.n)
        flat_blocks = reduce_scatter(oriented, average=True)
        blocks = [f.reshape(layout.block, oriented[0].shape[1]) for f in flat_blocks]

        if strategy == "galore":
            if should_refresh(step, cfg):
                _log_all(ranks, step, name, "all_gather", layout.m * layout.n)
                g_full = layout.from_shards(blocks)
                ps = compute_projector(g_full, cfg, step, ranks[0].proj_rngs[name])
                p_elems = int(np.prod(ps.dense().shape))
                _log_all(ranks, step, name, "broadcast", p_elems)
                for ctx in ranks:
                    ctx.projectors[name] = ps
                    if cfg.reset_moments_on_refresh and step > 0:
                        st = ctx.opt[name]
                        ctx.opt[name] = replace(
                            init_adam_state(st.moment_shape(), st.storage, st.block_size),
                            t=step,
                        )
            p_dense = ranks[0].projectors[name].dense()
            for k, ctx in enumerate(ranks):
                r_block = blocks[k] @ p_dense
                n_block, ctx.opt[name] = adam_lowrank_update(ctx.opt[name], r_block, hyper)
                update = cfg.alpha * (n_block @ p_dense.T)
                w_block = ctx.param_shards[name]
                w_new = w_block - hyper.lr * update
                if hyper.weight_decay != 0.0:
                    w_new = w_new - (hyper.lr * hyper.weight_decay) * w_block
                ctx.param_shards[name] = w_new
        else:
            for k, ctx in enumerate(ranks):
                n_block, ctx.opt[name] = adam_lowrank_update(ctx.opt[name], blocks[k], hyper)
                w_block = ctx.param_shards[name]
                w_new = w_block - hyper.lr * n_block
                if hyper.weight_decay != 0.0:
                    w_new = w_new - (hyper.lr * hyper.weight_decay) * w_block
                ctx.param_shards[name] = w_new

    for ctx in ranks:
        ctx.step += 1


def ddp_train_step(
    ranks: list[RankContext],
    batches: list,
    grad_fn,
    hyper: AdamHyper,
    cfgs: dict[str, ProjectionConfig] | None,
    strategy: str = "galore",
    layer_order: list[str] | None = None,
) -> None:
    """One replicated DDP training step, in place.

    Every rank computes full gradients for every layer (high-water = sum
    of layer sizes), gradients are all-reduce averaged, and each rank
    applies the identical full-shape update, so replicas stay
    bit-identical.
    """
    step = _check_lockstep(ranks)
    world = len(ranks)
    if len(batches) != world:
        raise ProtocolError(f"need one batch per rank, got {len(batches)} for world {world}")
    order = layer_order or list(ranks[0].params)

    per_rank_grads = [grad_fn(ctx.params, batches[k]) for k, ctx in enumerate(ranks)]
    total_elems = sum(ranks[0].params[name].size for name in order)
    for ctx in ranks:
        ctx.grad_highwater_elems = max(ctx.grad_highwater_elems, total_elems)

    for name in order:
        _log_all(ranks, step, name, "all_reduce", ranks[0].params[name].size)
        averaged = all_reduce([per_rank_grads[k][name] for k in range(world)], average=True)
        for k, ctx in enumerate(ranks):
            if strategy == "galore":
                w_new, ps_new, st_new = galore_step(
                    ctx.params[name], averaged[k], ctx.projectors[name], ctx.opt[name],
                    hyper, cfgs[name], step, ctx.proj_rngs[name],
                )
                ctx.params[name] = w_new
                ctx.projectors[name] = ps_new
                ctx.opt[name] = st_new
            else:
                ctx.params[name], ctx.opt[name] = adam_step(
                    ctx.params[name], averaged[k], ctx.opt[name], hyper
                )

    for ctx in ranks:
        ctx.step += 1


def fsdp_full_params(ranks: list[RankContext], layouts: dict[str, LayerLayout]) -> dict[str, np.ndarray]:
    """Reassemble full parameters from the shards (no logging; inspection)."""
    return {
        name: layout.from_shards([ctx.param_shards[name] for ctx in ranks])
        for name, layout in layouts.items()
    }


def collective_log_csv(log: list[CollectiveRecord]) -> str:
    """Render a collective log as CSV: step,layer,op,elements."""
    buf = io.StringIO()
    buf.write("step,layer,op,elements\n")
    for rec in log:
        buf.write(f"{rec.step},{rec.layer},{rec.kind},{rec.elements}\n")
    return buf.getvalue()
