"""Analytic memory accounting per layer, model, strategy, and sharding.

Element counts follow the per-layer formulas: full Adam keeps two full
moments (2mn); low-rank projection keeps moments on the long axis
(2 * max(m, n) * r) plus a min(m, n) * r projector; LoRA keeps the frozen
base plus adapters with their gradients and moments (mn + 3mr + 3nr).
Activations, KV caches, and framework overheads are deliberately out of
scope, so absolute byte totals are estimates; orderings between
strategies are the meaningful output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ParameterError

CATEGORIES = (
    "weights",
    "optimizer_state",
    "projector",
    "lowrank_grad_accum",
    "fullrank_grad_peak",
)

STRATEGIES = ("full_adam", "adam8bit", "galore", "galore_quant_proj", "lora")
SHARDINGS = ("single", "ddp", "fsdp")

STRATEGY_ALIASES = {
    "full_adam": "full_adam",
    "fulladam": "full_adam",
    "adam": "full_adam",
    "adamw": "full_adam",
    "adam8bit": "adam8bit",
    "galore": "galore",
    "galore_quant_proj": "galore_quant_proj",
    "galore-quant": "galore_quant_proj",
    "lora": "lora",
}


@dataclass
class LayerShape:
    """One weight matrix shape, possibly repeated `count` times."""

    name: str
    m: int
    n: int
    count: int = 1

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ParameterError(f"layer dims must be >= 1, got {self.m}x{self.n}")
        if self.count < 1:
            raise ParameterError(f"layer count must be >= 1, got {self.count}")


@dataclass
class ModelSpec:
    name: str
    layers: list[LayerShape]
    dtype_bytes: int = 4

    def __post_init__(self):
        if not self.layers:
            raise ParameterError("ModelSpec needs at least one layer")
        if self.dtype_bytes < 1:
            raise ParameterError("dtype_bytes must be >= 1")


def llama7b() -> ModelSpec:
    """7B-class transformer trunk: 32 layers of attention q/k/v/o at
    4096 x 4096 and MLP gate/up/down at 11008 x 4096 (or transpose).
    Embedding and lm-head matrices are excluded; the preset covers the
    attention and MLP weight matrices only."""
    hidden, intermediate, layers = 4096, 11008, 32
    return ModelSpec(
        name="llama7b",
        layers=[
            LayerShape("attn_qkvo", hidden, hidden, count=4 * layers),
            LayerShape("mlp_gate_up", intermediate, hidden, count=2 * layers),
            LayerShape("mlp_down", hidden, intermediate, count=layers),
        ],
    )


MODEL_PRESETS = {"llama7b": llama7b}


@dataclass
class Strategy:
    """Optimizer strategy tag for memory accounting."""

    kind: str
    rank: int | None = None
    bits: int = 8
    block_size: int = 256
    with_grad_accum: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ParameterError(f"unknown strategy '{self.kind}'")
        if self.kind in ("galore", "galore_quant_proj", "lora"):
            if self.rank is None or self.rank < 1:
                raise ParameterError(f"strategy '{self.kind}' requires rank >= 1")
        if self.bits not in (4, 8):
            raise ParameterError(f"bits must be 4 or 8, got {self.bits}")


@dataclass
class Sharding:
    kind: str = "single"
    world: int = 1

    def __post_init__(self):
        if self.kind not in SHARDINGS:
            raise ParameterError(f"unknown sharding '{self.kind}'")
        if self.world < 1:
            raise ParameterError(f"world must be >= 1, got {self.world}")
        if self.kind == "single" and self.world != 1:
            raise ParameterError("single sharding implies world == 1")


def elements_galore(m: int, n: int, r: int, with_grad_accum: bool = False) -> dict[str, int]:
    """Per-category element counts for one m x n layer under low-rank
    projection at rank r: weights mn, projector min(m,n)*r, moments
    2*max(m,n)*r, plus max(m,n)*r when the low-rank gradient is
    accumulated."""
    _check_rank(m, n, r)
    counts = {
        "weights": m * n,
        "projector": min(m, n) * r,
        "optimizer_state": 2 * max(m, n) * r,
        "lowrank_grad_accum": max(m, n) * r if with_grad_accum else 0,
    }
    counts["total"] = sum(counts.values())
    return counts


def elements_lora(m: int, n: int, r: int) -> dict[str, int]:
    """Per-category element counts for one m x n layer under LoRA at rank
    r: frozen base plus two adapters with gradients and Adam moments,
    mn + 3mr + 3nr in total."""
    _check_rank(m, n, r)
    counts = {
        "weights": m * n + m * r + n * r,
        "projector": 0,
        "optimizer_state": 2 * m * r + 2 * n * r,
        "lowrank_grad_accum": 0,
    }
    counts["total"] = sum(counts.values())
    return counts


def _check_rank(m: int, n: int, r: int) -> None:
    if m < 1 or n < 1:
        raise ParameterError(f"dims must be >= 1, got {m}x{n}")
    if r < 1:
        raise ParameterError(f"rank must be >= 1, got {r}")
    if r > min(m, n):
        raise ParameterError(f"rank {r} exceeds min(m, n) = {min(m, n)}")


@dataclass
class MemoryReport:
    """Element and byte counts per category, with a per-rank breakdown
    when sharded.  Totals are sums over the per-layer rows."""

    model: str
    strategy: Strategy
    sharding: Sharding
    per_layer: list[dict] = field(default_factory=list)
    total_elements: dict[str, int] = field(default_factory=dict)
    total_bytes: dict[str, float] = field(default_factory=dict)
    per_rank_bytes: dict[str, float] = field(default_factory=dict)
    note: str = "estimate covers weights/optimizer/projector/gradients only; activations and framework overhead excluded"

    def grand_total_bytes(self) -> float:
        return sum(self.total_bytes.values())

    def per_rank_total_bytes(self) -> float:
        return sum(self.per_rank_bytes.values())

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "strategy": {
                "kind": self.strategy.kind,
                "rank": self.strategy.rank,
                "bits": self.strategy.bits if self.strategy.kind in ("adam8bit", "galore_quant_proj") else None,
                "with_grad_accum": self.strategy.with_grad_accum,
            },
            "sharding": {"kind": self.sharding.kind, "world": self.sharding.world},
            "per_layer": self.per_layer,
            "totals": {
                "elements": self.total_elements,
                "bytes": self.total_bytes,
                "grand_total_bytes": self.grand_total_bytes(),
            },
            "per_rank": {
                "bytes": self.per_rank_bytes,
                "total_bytes": self.per_rank_total_bytes(),
            },
            "note": self.note,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _layer_accounting(layer: LayerShape, strategy: Strategy, dtype_bytes: int) -> tuple[dict, dict]:
    """(elements, bytes) per category for ONE instance of the layer.

    Quantized pieces store 1-byte codes plus one dtype-width scale per
    quantization group; element counts always refer to logical elements.
    """
    m, n, r = layer.m, layer.n, strategy.rank
    if strategy.kind == "full_adam":
        elems = {"weights": m * n, "optimizer_state": 2 * m * n, "projector": 0, "lowrank_grad_accum": 0}
        byts = {k: v * dtype_bytes for k, v in elems.items()}
    elif strategy.kind == "adam8bit":
        elems = {"weights": m * n, "optimizer_state": 2 * m * n, "projector": 0, "lowrank_grad_accum": 0}
        n_scales = 2 * (-(-(m * n) // strategy.block_size))
        byts = {
            "weights": m * n * dtype_bytes,
            "optimizer_state": 2 * m * n * 1 + n_scales * dtype_bytes,
            "projector": 0,
            "lowrank_grad_accum": 0,
        }
    elif strategy.kind in ("galore", "galore_quant_proj"):
        counts = elements_galore(m, n, r, strategy.with_grad_accum)
        elems = {k: counts[k] for k in ("weights", "optimizer_state", "projector", "lowrank_grad_accum")}
        byts = {k: v * dtype_bytes for k, v in elems.items()}
        if strategy.kind == "galore_quant_proj":
            proj_elems = elems["projector"]
            byts["projector"] = proj_elems * strategy.bits / 8.0 + r * dtype_bytes
    elif strategy.kind == "lora":
        counts = elements_lora(m, n, r)
        elems = {k: counts[k] for k in ("weights", "optimizer_state", "projector", "lowrank_grad_accum")}
        byts = {k: v * dtype_bytes for k, v in elems.items()}
    else:  # pragma: no cover - guarded by Strategy validation
        raise ParameterError(f"unknown strategy '{strategy.kind}'")
    return elems, byts


def model_report(spec: ModelSpec, strategy: Strategy, sharding: Sharding | None = None) -> MemoryReport:
    """Memory report for a whole model under one strategy and sharding.

    The full-rank gradient peak is the sum of all layer gradients for the
    accumulate-all path (single device and DDP) and the largest single
    layer for the per-layer fused update path (FSDP), where each gradient
    is discarded as soon as its layer's update is applied.  FSDP divides
    weights, optimizer state, and projectors evenly across ranks; DDP
    replicates everything.
    """
    sharding = sharding or Sharding()
    report = MemoryReport(model=spec.name, strategy=strategy, sharding=sharding)
    totals_e = {k: 0 for k in CATEGORIES}
    totals_b = {k: 0.0 for k in CATEGORIES}
    max_layer_grad = 0
    sum_layer_grad = 0
    for layer in spec.layers:
        elems, byts = _layer_accounting(layer, strategy, spec.dtype_bytes)
        row = {
            "name": layer.name,
            "m": layer.m,
            "n": layer.n,
            "count": layer.count,
            "elements": {k: v * layer.count for k, v in elems.items()},
            "bytes": {k: v * layer.count for k, v in byts.items()},
        }
        report.per_layer.append(row)
        for k in elems:
            totals_e[k] += elems[k] * layer.count
            totals_b[k] += byts[k] * layer.count
        max_layer_grad = max(max_layer_grad, layer.m * layer.n)
        sum_layer_grad += layer.m * layer.n * layer.count
    fused = sharding.kind == "fsdp"
    totals_e["fullrank_grad_peak"] = max_layer_grad if fused else sum_layer_grad
    totals_b["fullrank_grad_peak"] = totals_e["fullrank_grad_peak"] * spec.dtype_bytes
    report.total_elements = totals_e
    report.total_bytes = totals_b

    world = sharding.world
    if sharding.kind == "fsdp":
        shardable = ("weights", "optimizer_state", "projector", "lowrank_grad_accum")
        report.per_rank_bytes = {
            k: (totals_b[k] / world if k in shardable else totals_b[k]) for k in CATEGORIES
        }
    else:
        # single device or DDP: every rank holds the full replica
        report.per_rank_bytes = dict(totals_b)
    return report
