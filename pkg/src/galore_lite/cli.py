"""Command-line entry point.

Commands:
  train          run one experiment from a config file, write the log CSV
  proj-compare   run the same experiment once per projection method
  svd-bench      wall-time and accuracy of full vs randomized SVD
  memory-report  analytic memory estimate for a model/strategy/sharding

Config files are flat ``key = value`` text; ``#`` starts a comment and
blank lines are ignored.  Unknown keys are rejected.  Recognized keys and
their defaults:

  model=linear in_dim=16 out_dim=12 hidden_dim=24 teacher_rank=(unset)
  n_samples=400 noise_sd=0.0 data_seed=7 student_scale=0.5
  steps=200 batch_size=32 peak_lr=0.01 warmup_frac=0.1 final_lr_frac=0.1
  seed=0 eval_every=10 strategy=full_adam sharding=single world=1
  out=(unset)
  rank=4 update_freq=500 method=spectral alpha=0.125 oversample=8
  power_iters=1 bits=8 moment_storage=full64
  reset_moments_on_refresh=off bias_correction=on
  beta1=0.9 beta2=0.999 eps=1e-8

Exit codes: 0 success, 1 usage or config error, 2 numeric failure
(divergence, non-finite values, no convergence).

Setting GALORE_DETERMINISTIC=0 allows proj-compare to run its methods on
a thread pool; the default (deterministic mode) runs them sequentially.
Per-run results are identical either way because every run owns its
random streams.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import harness, matcore, memmodel
from .errors import (
    ConfigError,
    ConvergenceError,
    DivergenceError,
    GaloreLiteError,
    NumericError,
    ParameterError,
)
from .matcore import Rng
from .projector import ProjectionConfig, resolve_method

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

_BOOL_WORDS = {"on": True, "true": True, "1": True, "yes": True,
               "off": False, "false": False, "0": False, "no": False}

# key -> (parser, default); None default means "computed later"
_CONFIG_KEYS = {
    "model": (str, "linear"),
    "in_dim": (int, 16),
    "out_dim": (int, 12),
    "hidden_dim": (int, 24),
    "teacher_rank": (int, None),
    "n_samples": (int, 400),
    "noise_sd": (float, 0.0),
    "data_seed": (int, 7),
    "student_scale": (float, 0.5),
    "steps": (int, 200),
    "batch_size": (int, 32),
    "peak_lr": (float, 0.01),
    "warmup_frac": (float, 0.10),
    "final_lr_frac": (float, 0.10),
    "seed": (int, 0),
    "eval_every": (int, 10),
    "strategy": (str, "full_adam"),
    "sharding": (str, "single"),
    "world": (int, 1),
    "out": (str, None),
    "rank": (int, 4),
    "update_freq": (int, 500),
    "method": (str, "spectral"),
    "alpha": (float, 0.125),
    "oversample": (int, 8),
    "power_iters": (int, 1),
    "bits": (int, 8),
    "moment_storage": (str, "full64"),
    "reset_moments_on_refresh": ("bool", False),
    "bias_correction": ("bool", True),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
}


def deterministic_mode() -> bool:
    return os.environ.get("GALORE_DETERMINISTIC", "1") != "0"


def parse_config(path: str) -> dict:
    """Parse a flat key=value config file, applying defaults and types."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values = {k: default for k, (_, default) in _CONFIG_KEYS.items()}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{line}'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            kind = _CONFIG_KEYS[key][0]
            try:
                if kind == "bool":
                    if value.lower() not in _BOOL_WORDS:
                        raise ValueError(f"not a boolean: '{value}'")
                    values[key] = _BOOL_WORDS[value.lower()]
                else:
                    values[key] = kind(value)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for '{key}': {exc}") from exc
    return values


def build_experiment(values: dict):
    """(model, dataset, TrainConfig) from parsed config values."""
    kind = values["model"]
    if kind not in ("linear", "mlp2"):
        raise ConfigError(f"unknown model '{kind}' (expected linear or mlp2)")
    dims = {"in": values["in_dim"], "out": values["out_dim"], "hidden": values["hidden_dim"]}
    data_rng = Rng(values["data_seed"])
    teacher_rng = data_rng.spawn(1)
    if kind == "linear" and values["teacher_rank"] is not None:
        teacher = harness.make_lowrank_teacher(
            teacher_rng, dims["out"], dims["in"], values["teacher_rank"]
        )
    else:
        teacher = harness.make_model(kind, dims, teacher_rng, scale=1.0)
    data = harness.make_dataset(
        data_rng.spawn(2), teacher, values["n_samples"], values["noise_sd"]
    )
    student = harness.make_model(kind, dims, Rng(values["seed"]).spawn(3),
                                 scale=values["student_scale"])

    strategy = values["strategy"].strip().lower().replace("-", "_")
    if strategy == "fulladam":
        strategy = "full_adam"
    projection = None
    if strategy == "galore":
        method, bits_override = resolve_method(values["method"])
        projection = ProjectionConfig(
            rank=values["rank"],
            update_freq=values["update_freq"],
            method=method,
            alpha=values["alpha"],
            oversample=values["oversample"],
            power_iters=values["power_iters"],
            bits=bits_override or values["bits"],
            reset_moments_on_refresh=values["reset_moments_on_refresh"],
        )
    cfg = harness.TrainConfig(
        steps=values["steps"],
        batch_size=values["batch_size"],
        peak_lr=values["peak_lr"],
        warmup_frac=values["warmup_frac"],
        final_lr_frac=values["final_lr_frac"],
        seed=values["seed"],
        strategy=strategy,
        projection=projection,
        moment_storage=values["moment_storage"],
        beta1=values["beta1"],
        beta2=values["beta2"],
        eps=values["eps"],
        bias_correction=values["bias_correction"],
        sharding=values["sharding"],
        world=values["world"],
        eval_every=values["eval_every"],
    )
    return student, data, cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    values = parse_config(args.config)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out is not None:
        values["out"] = args.out
    model, data, cfg = build_experiment(values)
    run = harness.train(model, data, cfg)
    csv_text = run.to_csv()
    if values["out"]:
        with open(values["out"], "w", encoding="utf-8") as fh:
            fh.write(csv_text)
        print(f"wrote {values['out']}")
    else:
        sys.stdout.write(csv_text)
    print(
        f"final: train_loss={run.final_train_loss:.6g} val_loss={run.final_val_loss:.6g}"
    )
    return EXIT_OK


def _run_one_method(values: dict, method: str) -> tuple[str, harness.RunLog]:
    v = dict(values)
    v["strategy"] = "galore"
    v["method"] = method
    model, data, cfg = build_experiment(v)
    return method, harness.train(model, data, cfg)


def cmd_proj_compare(args) -> int:
    values = parse_config(args.config)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise ConfigError("no methods given")
    for m in methods:
        resolve_method(m)  # validate early
    if deterministic_mode():
        results = [_run_one_method(values, m) for m in methods]
    else:
        with ThreadPoolExecutor(max_workers=len(methods)) as pool:
            results = list(pool.map(lambda m: _run_one_method(values, m), methods))
    lines = ["method,step,train_loss,val_loss,lr,refresh"]
    for method, run in results:
        for row in run.to_csv().splitlines()[1:]:
            lines.append(f"{method},{row}")
    csv_text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(csv_text)
    print("\nfinal val loss by method:")
    for method, run in results:
        print(f"  {method:<12} {run.final_val_loss:.6g}")
    return EXIT_OK


def _bench_matrix(size: int, seed: int) -> np.ndarray:
    """Square test matrix with singular values decaying from 1 to 1e-4."""
    rng = Rng(seed)
    q1 = matcore.qr_thin(matcore.gaussian(rng, size, size))[0]
    q2 = matcore.qr_thin(matcore.gaussian(rng, size, size))[0]
    spectrum = np.logspace(0.0, -4.0, size)
    return (q1 * spectrum) @ q2.T


def cmd_svd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    if not sizes:
        raise ConfigError("no sizes given")
    rows = []
    for size in sizes:
        rank = max(1, int(round(args.rank_frac * size)))
        a = _bench_matrix(size, args.seed)
        t_full, full = _best_of(args.trials, lambda: matcore.svd_full(a))
        t_rand, rand = _best_of(
            args.trials,
            lambda: matcore.randomized_svd(
                a, rank, args.oversample, args.power_iters, Rng(args.seed + 100)
            ),
        )
        optimal = float(np.sqrt((full.s[rank:] ** 2).sum()))
        resid = float(np.linalg.norm(a - rand.u @ (rand.u.T @ a)))
        ratio = resid / optimal if optimal > 0 else float("inf")
        rows.append((size, rank, t_full, t_rand, t_full / t_rand, ratio))
    print(f"{'size':>6} {'rank':>6} {'full_svd_s':>12} {'rand_svd_s':>12} {'speedup':>9} {'resid_ratio':>12}")
    for size, rank, tf, tr, sp, ratio in rows:
        print(f"{size:>6} {rank:>6} {tf:>12.4f} {tr:>12.4f} {sp:>9.2f} {ratio:>12.4f}")
    return EXIT_OK


def _best_of(trials: int, fn):
    """(best wall time, result) over `trials` runs of a deterministic fn."""
    best = float("inf")
    result = None
    for _ in range(max(1, trials)):
        t0 = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t0)
    return best, result


def cmd_memory_report(args) -> int:
    preset = memmodel.MODEL_PRESETS.get(args.model)
    if preset is None:
        raise ConfigError(
            f"unknown model '{args.model}' (available: {', '.join(sorted(memmodel.MODEL_PRESETS))})"
        )
    spec = preset()
    if args.dtype_bytes:
        spec.dtype_bytes = args.dtype_bytes
    kind = memmodel.STRATEGY_ALIASES.get(args.strategy.strip().lower())
    if kind is None:
        raise ConfigError(f"unknown strategy '{args.strategy}'")
    strategy = memmodel.Strategy(
        kind=kind,
        rank=args.rank,
        bits=args.bits,
        with_grad_accum=args.grad_accum,
    )
    shard_kind = args.sharding
    if shard_kind is None:
        shard_kind = "fsdp" if args.world > 1 else "single"
    sharding = memmodel.Sharding(kind=shard_kind, world=args.world)
    report = memmodel.model_report(spec, strategy, sharding)
    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="galore-lite", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one experiment from a config file")
    p_train.add_argument("--config", required=True, help="path to key=value config file")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out", default=None, help="override the output CSV path")
    p_train.set_defaults(fn=cmd_train)

    p_cmp = sub.add_parser("proj-compare", help="compare projection methods on one task")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--methods", default="spectral,randomized,random,quant8",
                       help="comma-separated: spectral,randomized,random,quant8,quant4,identity")
    p_cmp.add_argument("--out", default=None, help="merged CSV output path")
    p_cmp.set_defaults(fn=cmd_proj_compare)

    p_bench = sub.add_parser("svd-bench", help="full vs randomized SVD wall time")
    p_bench.add_argument("--sizes", default="256", help="comma-separated square sizes")
    p_bench.add_argument("--rank-frac", type=float, default=0.25)
    p_bench.add_argument("--trials", type=int, default=3)
    p_bench.add_argument("--oversample", type=int, default=8)
    p_bench.add_argument("--power-iters", type=int, default=1)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.set_defaults(fn=cmd_svd_bench)

    p_mem = sub.add_parser("memory-report", help="analytic memory estimate")
    p_mem.add_argument("--model", default="llama7b")
    p_mem.add_argument("--strategy", default="galore")
    p_mem.add_argument("--rank", type=int, default=1024)
    p_mem.add_argument("--bits", type=int, default=8)
    p_mem.add_argument("--sharding", default=None, choices=("single", "ddp", "fsdp"),
                       help="defaults to fsdp when --world > 1, else single")
    p_mem.add_argument("--world", type=int, default=1)
    p_mem.add_argument("--dtype-bytes", type=int, default=None)
    p_mem.add_argument("--grad-accum", action="store_true")
    p_mem.add_argument("--out", default=None)
    p_mem.set_defaults(fn=cmd_memory_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NumericError, ConvergenceError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GaloreLiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
