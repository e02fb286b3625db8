"""Toy models, synthetic teacher-student data, the LR schedule, and
end-to-end training loops.

The models are small enough that every gradient is written out
analytically (no autodiff), which keeps the optimizer paths exactly
testable against finite differences.  Training samples batches with
replacement from a seeded stream; a run is a pure function of its config,
so repeated runs produce byte-identical logs.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import shardsim
from .errors import DivergenceError, ParameterError
from .matcore import Rng, gaussian
from .optim import (
    AdamHyper,
    adam_step,
    galore_step,
    init_adam_state,
    lowrank_moment_shape,
)
from .projector import ProjectionConfig, should_refresh

STRATEGIES = ("full_adam", "adam8bit", "galore")
DIVERGENCE_THRESHOLD = 1e6


# ---------------------------------------------------------------------------
# toy models (columns of x are samples)
# ---------------------------------------------------------------------------

@dataclass
class LinearModel:
    """y = W x with W out_dim x in_dim."""

    w: np.ndarray

    def params(self) -> dict[str, np.ndarray]:
        return {"w": self.w}

    def with_params(self, params: dict[str, np.ndarray]) -> "LinearModel":
        return LinearModel(w=params["w"])

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.w @ x


@dataclass
class MLP2Model:
    """y = W2 tanh(W1 x) with W1 hidden x in, W2 out x hidden."""

    w1: np.ndarray
    w2: np.ndarray

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "w2": self.w2}

    def with_params(self, params: dict[str, np.ndarray]) -> "MLP2Model":
        return MLP2Model(w1=params["w1"], w2=params["w2"])

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.w2 @ np.tanh(self.w1 @ x)


ToyModel = LinearModel | MLP2Model


def make_model(kind: str, dims: dict[str, int], rng: Rng, scale: float = 0.5) -> ToyModel:
    """Random model of the given kind; dims uses in/out(/hidden) keys."""
    if kind == "linear":
        w = scale * gaussian(rng, dims["out"], dims["in"]) / math.sqrt(dims["in"])
        return LinearModel(w=w)
    if kind == "mlp2":
        w1 = scale * gaussian(rng, dims["hidden"], dims["in"]) / math.sqrt(dims["in"])
        w2 = scale * gaussian(rng, dims["out"], dims["hidden"]) / math.sqrt(dims["hidden"])
        return MLP2Model(w1=w1, w2=w2)
    raise ParameterError(f"unknown model kind '{kind}'")


def make_lowrank_teacher(rng: Rng, out_dim: int, in_dim: int, teacher_rank: int) -> LinearModel:
    """Linear teacher whose weight is an exact rank-`teacher_rank` product."""
    if teacher_rank < 1 or teacher_rank > min(out_dim, in_dim):
        raise ParameterError(f"teacher_rank must be in [1, {min(out_dim, in_dim)}]")
    left = gaussian(rng, out_dim, teacher_rank)
    right = gaussian(rng, in_dim, teacher_rank)
    return LinearModel(w=left @ right.T / math.sqrt(teacher_rank * in_dim))


def loss(model: ToyModel, x: np.ndarray, y: np.ndarray) -> float:
    """MSE over the batch: mean over samples of the squared error summed
    over output coordinates."""
    r = model.predict(x) - y
    return float((r * r).sum(axis=0).mean())


def grad(model: ToyModel, batch: tuple[np.ndarray, np.ndarray]) -> dict[str, np.ndarray]:
    """Analytic gradients of the batch MSE with respect to each weight."""
    x, y = batch
    if x.shape[1] == 0:
        raise ParameterError("batch must be non-empty")
    b = x.shape[1]
    if isinstance(model, LinearModel):
        r = model.w @ x - y
        return {"w": (2.0 / b) * (r @ x.T)}
    a = model.w1 @ x
    h = np.tanh(a)
    r = model.w2 @ h - y
    dw2 = (2.0 / b) * (r @ h.T)
    dh = model.w2.T @ r
    da = dh * (1.0 - h * h)
    dw1 = (2.0 / b) * (da @ x.T)
    return {"w1": dw1, "w2": dw2}


def grad_fn_for(model: ToyModel):
    """Gradient closure over parameter dicts, for the sharded simulators."""

    def fn(params: dict[str, np.ndarray], batch):
        return grad(model.with_params(params), batch)

    return fn


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray

    @property
    def n_train(self) -> int:
        return self.x_train.shape[1]


def make_dataset(
    rng: Rng,
    teacher: ToyModel,
    n_samples: int,
    noise_sd: float,
    val_frac: float = 0.2,
    in_dim: int | None = None,
) -> Dataset:
    """Gaussian inputs, teacher outputs plus Gaussian noise, and a
    deterministic disjoint train/val split (validation takes the trailing
    samples)."""
    if n_samples < 2:
        raise ParameterError(f"n_samples must be >= 2, got {n_samples}")
    if not 0.0 < val_frac < 1.0:
        raise ParameterError(f"val_frac must be in (0, 1), got {val_frac}")
    if in_dim is None:
        first = next(iter(teacher.params().values()))
        in_dim = first.shape[1]
    x = gaussian(rng, in_dim, n_samples)
    y = teacher.predict(x)
    if noise_sd > 0.0:
        y = y + noise_sd * gaussian(rng, y.shape[0], y.shape[1])
    n_val = max(1, int(round(val_frac * n_samples)))
    n_train = n_samples - n_val
    if n_train < 1:
        raise ParameterError("split leaves no training samples")
    return Dataset(
        x_train=x[:, :n_train],
        y_train=y[:, :n_train],
        x_val=x[:, n_train:],
        y_val=y[:, n_train:],
    )


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Everything a training run depends on (the model and data are
    passed separately)."""

    steps: int
    batch_size: int
    peak_lr: float
    warmup_frac: float = 0.10
    final_lr_frac: float = 0.10
    seed: int = 0
    strategy: str = "full_adam"
    projection: ProjectionConfig | None = None
    moment_storage: str = "full64"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = True
    sharding: str = "single"
    world: int = 1
    eval_every: int = 10

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.peak_lr > 0.0:
            raise ParameterError("peak_lr must be > 0")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ParameterError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if not 0.0 < self.final_lr_frac <= 1.0:
            raise ParameterError(f"final_lr_frac must be in (0, 1], got {self.final_lr_frac}")
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy '{self.strategy}'")
        if self.strategy == "galore" and self.projection is None:
            raise ParameterError("galore strategy requires a ProjectionConfig")
        if self.sharding not in ("single", "ddp", "fsdp"):
            raise ParameterError(f"unknown sharding '{self.sharding}'")
        if self.sharding == "single" and self.world != 1:
            raise ParameterError("single sharding implies world == 1")
        if self.world < 1:
            raise ParameterError("world must be >= 1")
        if self.sharding != "single" and self.batch_size % self.world != 0:
            raise ParameterError("batch_size must divide evenly across the world")
        if self.eval_every < 1:
            raise ParameterError("eval_every must be >= 1")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak over the first warmup_frac of training,
    then cosine decay to final_lr_frac * peak at the last step."""
    if step < 0 or step > cfg.steps:
        raise ParameterError(f"step must be in [0, {cfg.steps}], got {step}")
    warmup_steps = max(1, int(round(cfg.warmup_frac * cfg.steps)))
    if step <= warmup_steps:
        return cfg.peak_lr * step / warmup_steps
    progress = (step - warmup_steps) / (cfg.steps - warmup_steps)
    floor = cfg.final_lr_frac
    return cfg.peak_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


# ---------------------------------------------------------------------------
# run log
# ---------------------------------------------------------------------------

@dataclass
class LogRow:
    step: int
    train_loss: float
    val_loss: float
    lr: float
    refresh: bool


@dataclass
class RunLog:
    rows: list[LogRow] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,train_loss,val_loss,lr,refresh\n")
        for row in self.rows:
            buf.write(
                f"{row.step},{row.train_loss:.12g},{row.val_loss:.12g},"
                f"{row.lr:.12g},{int(row.refresh)}\n"
            )
        return buf.getvalue()

    @property
    def final_val_loss(self) -> float:
        return self.summary["final_val_loss"]

    @property
    def final_train_loss(self) -> float:
        return self.summary["final_train_loss"]


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _per_layer_projection(cfg: TrainConfig, params: dict[str, np.ndarray]) -> dict[str, ProjectionConfig]:
    """Per-layer projection configs: the identity method adapts its rank
    to each layer, other methods validate the shared rank."""
    out = {}
    base = cfg.projection
    for name, w in params.items():
        small = min(w.shape)
        if base.method == "identity":
            out[name] = replace(base, rank=small)
        else:
            if base.rank > small:
                raise ParameterError(
                    f"rank {base.rank} exceeds min dim {small} of layer '{name}'"
                )
            out[name] = base
    return out


def _check_divergence(value: float, step: int, log: RunLog) -> None:
    if not math.isfinite(value) or value > DIVERGENCE_THRESHOLD:
        raise DivergenceError(
            f"training diverged at step {step}: batch loss {value}", run_log=log
        )


def train(model: ToyModel, data: Dataset, cfg: TrainConfig) -> RunLog:
    """Run the configured strategy and return the log.

    Logged losses are measured on the full train/val splits before the
    step at each logged step; the summary holds the post-training final
    losses.  Raises DivergenceError when the batch loss exceeds 1e6 or
    goes non-finite.
    """
    root = Rng(cfg.seed)
    batch_rng = root.spawn(1)
    proj_seed = root.spawn(2).seed

    params = {k: v.copy() for k, v in model.params().items()}
    names = list(params)
    storage = "quant8" if cfg.strategy == "adam8bit" else cfg.moment_storage
    base_hyper = AdamHyper(
        lr=cfg.peak_lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
        bias_correction=cfg.bias_correction,
    )

    cfgs = _per_layer_projection(cfg, params) if cfg.strategy == "galore" else None

    ranks = None
    layouts = None
    grad_closure = grad_fn_for(model)
    sim_strategy = "galore" if cfg.strategy == "galore" else "full_adam"
    if cfg.sharding == "fsdp":
        ranks, layouts = shardsim.make_fsdp_ranks(
            params, cfg.world, cfgs, strategy=sim_strategy, storage=storage, proj_seed=proj_seed
        )
    elif cfg.sharding == "ddp":
        ranks = shardsim.make_ddp_ranks(
            params, cfg.world, cfgs, strategy=sim_strategy, storage=storage, proj_seed=proj_seed
        )
    else:
        proj_rngs = shardsim.projector_rngs(proj_seed, names)
        states = {}
        for name in names:
            m, n = params[name].shape
            if cfg.strategy == "galore":
                shape = lowrank_moment_shape(m, n, cfgs[name].rank)
            else:
                shape = (m, n)
            states[name] = init_adam_state(shape, storage)
        projectors = {name: None for name in names}

    def current_params() -> dict[str, np.ndarray]:
        if cfg.sharding == "fsdp":
            return shardsim.fsdp_full_params(ranks, layouts)
        if cfg.sharding == "ddp":
            return ranks[0].params
        return params

    def eval_model() -> ToyModel:
        return model.with_params(current_params())

    log = RunLog()
    refresh_active = cfg.strategy == "galore"
    for step in range(cfg.steps):
        lr = lr_at(step, cfg)
        refresh = refresh_active and should_refresh(step, cfg.projection)
        if step % cfg.eval_every == 0 or step == cfg.steps - 1:
            snapshot = eval_model()
            log.rows.append(
                LogRow(
                    step=step,
                    train_loss=loss(snapshot, data.x_train, data.y_train),
                    val_loss=loss(snapshot, data.x_val, data.y_val),
                    lr=lr,
                    refresh=refresh,
                )
            )
        idx = batch_rng.integers(cfg.batch_size, data.n_train)
        x = data.x_train[:, idx]
        y = data.y_train[:, idx]
        hyper = replace(base_hyper, lr=lr)
        if cfg.sharding == "fsdp":
            shardsim.fsdp_galore_train_step(
                ranks, layouts, _split_batch(x, y, cfg.world), grad_closure,
                hyper, cfgs, strategy=sim_strategy,
            )
        elif cfg.sharding == "ddp":
            shardsim.ddp_train_step(
                ranks, _split_batch(x, y, cfg.world), grad_closure,
                hyper, cfgs, strategy=sim_strategy,
            )
        else:
            grads = grad(model.with_params(params), (x, y))
            for name in names:
                if cfg.strategy == "galore":
                    params[name], projectors[name], states[name] = galore_step(
                        params[name], grads[name], projectors[name], states[name],
                        hyper, cfgs[name], step, proj_rngs[name],
                    )
                else:
                    params[name], states[name] = adam_step(
                        params[name], grads[name], states[name], hyper
                    )
        _check_divergence(loss(eval_model(), x, y), step, log)

    final = eval_model()
    log.summary = {
        "steps": cfg.steps,
        "strategy": cfg.strategy,
        "sharding": cfg.sharding,
        "final_train_loss": loss(final, data.x_train, data.y_train),
        "final_val_loss": loss(final, data.x_val, data.y_val),
    }
    if ranks is not None:
        log.summary["grad_highwater_elems"] = ranks[0].grad_highwater_elems
    return log


def _split_batch(x: np.ndarray, y: np.ndarray, world: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a global batch into contiguous equal per-rank micro-batches."""
    per = x.shape[1] // world
    return [
        (x[:, k * per : (k + 1) * per], y[:, k * per : (k + 1) * per])
        for k in range(world)
    ]
