"""``denseplan`` command line: train, profile-mem, bench, gradcheck, compare.

Settings are merged as built-in defaults < ``--config`` file < explicit
flags.  The config file holds flat ``key=value`` lines (``#`` comments);
keys mirror the long flag names with ``_`` or ``-``, plus the model keys of
:data:`denseplan.densenet.MODEL_KEYS`, which override the preset.

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcheck, ops
from .alloctrace import predict_peak_elements
from .densenet import MODEL_KEYS, PRESETS, DenseNetConfig, config_from_mapping, parse_kv, preset, with_depth
from .errors import ConfigError, DenseplanError, FormatError, LabelError, ShapeError, VerificationError
from .graph import ExecutionStrategy, NodeKind, build_plan, step_trace
from .tensor import ArenaTag, Tensor, resolve_dtype
from .train import (
    CIFAR_MEAN, CIFAR_STD, TrainConfig, load_cifar10_dir, save_checkpoint, synth_dataset, train,
)

log = logging.getLogger("denseplan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4
COMMANDS = ("train", "profile-mem", "bench", "gradcheck", "compare")
STRATEGIES = [s.value for s in ExecutionStrategy]

DEFAULT_PRESET = {
    "train": "desk",
    "profile-mem": "cifar-k12",
    "bench": "desk",
    "gradcheck": "tiny",
    "compare": "desk",
}
DEFAULTS = {
    "strategy": "shared-all",
    "epochs": 30,
    "seed": 0,
    "dtype": "f64",
    "data": "synth",
    "depth_grid": "10,16,22,28",
    "image_size": 8,
    "samples": 320,
    "schedule": "cosine",
    "warmup": 5,
    "iters": 20,
}
DEFAULT_BATCH = {"train": 40, "profile-mem": 2, "bench": 8, "gradcheck": 2, "compare": 4}
RUN_KEYS = set(DEFAULTS) | {"batch", "preset", "out", "checkpoint", "data_mean", "data_std", "log"}


@dataclass
class RunConfig:
    command: str
    model: DenseNetConfig
    preset: str | None
    strategy: ExecutionStrategy
    seed: int
    epochs: int
    batch: int
    dtype: np.dtype
    data: str
    data_dir: Path | None
    out: Path | None
    checkpoint: Path | None
    depth_grid: tuple
    image_size: int
    samples: int
    schedule: str
    warmup: int
    iters: int
    data_mean: tuple = CIFAR_MEAN
    data_std: tuple = CIFAR_STD
    log_path: Path | None = None
    extra: dict = field(default_factory=dict)

    @property
    def spatial(self) -> tuple[int, int]:
        return (self.image_size, self.image_size)


# --------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", help=f"model preset ({', '.join(PRESETS)})")
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--strategy", choices=STRATEGIES)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--dtype", choices=["f32", "f64"])
    common.add_argument("--data", help="synth or cifar10:<dir>")
    common.add_argument("--out", help="CSV output path (stdout if omitted)")
    common.add_argument("--depth-grid", help="comma-separated depths for profile-mem")
    common.add_argument("--image-size", type=int, help="spatial size of synthetic inputs")
    common.add_argument("--samples", type=int, help="synthetic dataset size")
    common.add_argument("--schedule", choices=["cosine", "step"])
    common.add_argument("--checkpoint", help="checkpoint path written by train")
    common.add_argument("--warmup", type=int, help="bench warmup iterations (>= 5)")
    common.add_argument("--iters", type=int, help="bench measured iterations (>= 20)")

    parser = argparse.ArgumentParser(prog="denseplan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train a model and write per-epoch CSV rows",
        "profile-mem": "measured vs predicted feature-memory peak over a depth grid",
        "bench": "step time per strategy and contiguous vs strided convolution",
        "gradcheck": "finite-difference check of every backward formula",
        "compare": "one step under every strategy; gradients must match bitwise",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _read_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    raw = parse_kv(text)
    unknown = set(raw) - RUN_KEYS - set(MODEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return raw


def _int(raw: dict, key: str, minimum: int) -> int:
    try:
        value = int(raw[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be an integer, got {raw[key]!r}") from None
    if value < minimum:
        raise ConfigError(f"{key} must be >= {minimum}, got {value}")
    return value


def _floats(text: str, key: str) -> tuple:
    try:
        vals = tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise ConfigError(f"{key} must be comma-separated numbers") from None
    if len(vals) != 3:
        raise ConfigError(f"{key} needs 3 per-channel values")
    return vals


def resolve(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, config file and flags; validate everything up front."""
    raw = dict(DEFAULTS)
    model_raw = {}
    if args.config:
        file_raw = _read_config_file(args.config)
        model_raw = {k: v for k, v in file_raw.items() if k in MODEL_KEYS}
        raw.update({k: v for k, v in file_raw.items() if k in RUN_KEYS})
    for key, value in vars(args).items():
        if key not in ("command", "config") and value is not None:
            raw[key] = value
    command = args.command
    raw.setdefault("batch", DEFAULT_BATCH[command])

    preset_name = raw.get("preset") or DEFAULT_PRESET[command]
    try:
        model = preset(preset_name)
    except (KeyError, ConfigError):
        raise ConfigError(f"unknown preset {preset_name!r}; choose from {', '.join(PRESETS)}") from None
    if model_raw:
        model = config_from_mapping(model_raw, base=model)

    try:
        strategy = ExecutionStrategy.parse(raw["strategy"])
    except ValueError:
        raise ConfigError(f"unknown strategy {raw['strategy']!r}") from None
    try:
        dtype = resolve_dtype(raw["dtype"])
    except ShapeError as exc:
        raise ConfigError(str(exc)) from None

    data = str(raw["data"])
    data_dir = None
    if data.startswith("cifar10:"):
        data_dir = Path(data.split(":", 1)[1])
        if not str(data_dir):
            raise ConfigError("cifar10 data needs a directory: --data cifar10:<dir>")
        data = "cifar10"
    elif data != "synth":
        raise ConfigError(f"--data must be synth or cifar10:<dir>, got {data!r}")

    try:
        grid = tuple(int(d) for d in str(raw["depth_grid"]).split(",") if d.strip())
    except ValueError:
        raise ConfigError(f"bad depth grid {raw['depth_grid']!r}") from None
    if not grid:
        raise ConfigError("depth grid is empty")
    if command == "profile-mem":
        for d in grid:
            with_depth(model, d)  # raises ConfigError for impossible depths

    schedule = str(raw["schedule"])
    if schedule not in ("cosine", "step"):
        raise ConfigError(f"unknown schedule {schedule!r}")

    rc = RunConfig(
        command=command,
        model=model,
        preset=preset_name,
        strategy=strategy,
        seed=_int(raw, "seed", 0),
        epochs=_int(raw, "epochs", 1),
        batch=_int(raw, "batch", 1),
        dtype=dtype,
        data=data,
        data_dir=data_dir,
        out=Path(raw["out"]) if raw.get("out") else None,
        checkpoint=Path(raw["checkpoint"]) if raw.get("checkpoint") else None,
        depth_grid=grid,
        image_size=_int(raw, "image_size", 1),
        samples=_int(raw, "samples", 1),
        schedule=schedule,
        warmup=_int(raw, "warmup", 5),
        iters=_int(raw, "iters", 20),
        log_path=Path(raw["log"]) if raw.get("log") else None,
    )
    if "data_mean" in raw:
        rc.data_mean = _floats(raw["data_mean"], "data_mean")
    if "data_std" in raw:
        rc.data_std = _floats(raw["data_std"], "data_std")
        if min(rc.data_std) <= 0:
            raise ConfigError("data_std must be positive")
    if rc.data == "synth" and rc.samples < model.num_classes:
        raise ConfigError(f"samples ({rc.samples}) must be >= num_classes ({model.num_classes})")
    if rc.out is not None and not rc.out.parent.exists():
        raise ConfigError(f"output directory {rc.out.parent} does not exist")
    if command in ("train", "bench", "compare", "gradcheck"):
        from .densenet import geometry

        geometry(model, rc.image_size, rc.image_size)
    return rc


# --------------------------------------------------------------------------
# output helpers


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


class CsvSink:
    """Collects rows and publishes them atomically (or to stdout)."""

    def __init__(self, path: Path | None, header: list[str]):
        self.path = path
        self.buf = io.StringIO()
        self.writer = csv.writer(self.buf, lineterminator="\n")
        self.writer.writerow(header)

    def row(self, *values) -> None:
        self.writer.writerow([fmt(v) for v in values])

    def publish(self) -> None:
        text = self.buf.getvalue()
        if self.path is None:
            sys.stdout.write(text)
            return
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, self.path)


def _sidecar(rc: RunConfig, suffix: str) -> Path | None:
    if rc.log_path is not None:
        return rc.log_path
    return rc.out.with_name(rc.out.name + suffix) if rc.out is not None else None


def _inputs(rc: RunConfig, model: DenseNetConfig, batch: int):
    rng = np.random.Generator(np.random.PCG64(rc.seed))
    x = rng.standard_normal((batch, model.in_channels) + rc.spatial).astype(rc.dtype)
    y = rng.integers(0, model.num_classes, batch)
    return x, y


# --------------------------------------------------------------------------
# commands


def cmd_train(rc: RunConfig) -> int:
    if rc.data == "synth":
        data = synth_dataset(rc.seed, rc.samples, (rc.model.in_channels,) + rc.spatial, rc.model.num_classes)
    else:
        data = load_cifar10_dir(rc.data_dir, rc.data_mean, rc.data_std, seed=rc.seed)
    tc = TrainConfig(
        epochs=rc.epochs, batch=rc.batch, seed=rc.seed, strategy=rc.strategy.value,
        dtype=rc.dtype.name, schedule=rc.schedule,
    )
    sink = CsvSink(rc.out, ["epoch", "lr", "train_loss", "train_acc", "feature_peak_bytes", "param_bytes"])
    timing = []

    def on_epoch(row):
        sink.row(row.epoch, row.lr, row.train_loss, row.train_acc, row.feature_peak_bytes, row.param_bytes)
        timing.append(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} epoch={row.epoch} step_ms={row.step_ms:.3f}")
        log.info("epoch %d lr %.5g loss %.5f acc %.4f step %.1f ms",
                 row.epoch, row.lr, row.train_loss, row.train_acc, row.step_ms)

    result = train(rc.model, data, tc, on_epoch)
    ckpt = rc.checkpoint or (rc.out.with_suffix(".ckpt") if rc.out else Path("denseplan.ckpt"))
    save_checkpoint(ckpt, result.plan.state_dict(), result.opt, rc.epochs)
    sink.publish()
    side = _sidecar(rc, ".log")
    if side is not None:
        side.write_text("\n".join(timing) + "\n", encoding="utf-8")
    log.info("checkpoint written to %s", ckpt)
    return EXIT_OK


def cmd_profile_mem(rc: RunConfig) -> int:
    sink = CsvSink(rc.out, ["depth", "strategy", "measured_feature_peak", "predicted_feature_peak", "param_bytes"])
    mismatches = []
    batch = rc.batch
    for depth in rc.depth_grid:
        cfg = with_depth(rc.model, depth)
        x, y = _inputs(rc, cfg, batch)
        for strategy in ExecutionStrategy:
            plan = build_plan(cfg, strategy, batch, x.shape, seed=rc.seed, dtype=rc.dtype)
            measured = step_trace(plan, x, y).stats.total_feature_peak_bytes
            predicted = predict_peak_elements(cfg, strategy, batch, rc.spatial).feature_bytes(rc.dtype.itemsize)
            sink.row(depth, strategy.value, measured, predicted, plan.param_bytes)
            if measured != predicted:
                mismatches.append((depth, strategy.value, measured, predicted))
            plan.close()
    sink.publish()
    if mismatches:
        raise VerificationError(f"measured != predicted for {mismatches}")
    return EXIT_OK


def _median_ms(fn, warmup: int, iters: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        samples.append(1000.0 * (time.perf_counter() - t0))
    return float(np.median(samples))


def cmd_bench(rc: RunConfig) -> int:
    """Timings are wall-clock and so vary run to run; FLOP rows are exact."""
    sink = CsvSink(rc.out, ["metric", "subject", "value"])
    x, y = _inputs(rc, rc.model, rc.batch)
    times, traces = {}, {}
    for strategy in ExecutionStrategy:
        plan = build_plan(rc.model, strategy, rc.batch, x.shape, seed=rc.seed, dtype=rc.dtype)
        traces[strategy] = step_trace(plan, x, y).trace
        times[strategy] = _median_ms(lambda: step_trace(plan, x, y), rc.warmup, rc.iters)
        sink.row("step_ms_median", strategy.value, times[strategy])
    naive, shared = traces[ExecutionStrategy.NAIVE], traces[ExecutionStrategy.SHARED_ALL]
    sink.row("step_time_ratio", "shared-all/naive", times[ExecutionStrategy.SHARED_ALL] / times[ExecutionStrategy.NAIVE])
    sink.row("recompute_flop_pct", "shared-all", 100.0 * shared.phase_flops("recompute") / shared.total_flops())
    sink.row("bn_concat_flop_pct", "naive",
             100.0 * naive.kind_flops(NodeKind.BATCHNORM.value, NodeKind.CONCAT.value) / naive.total_flops())

    # identical values, one dense and one channel-strided layout
    rng = np.random.Generator(np.random.PCG64(rc.seed))
    c = rc.model.initial_channels + rc.model.growth_rate * max(rc.model.block_sizes)
    dense = rng.standard_normal((rc.batch, c) + rc.spatial).astype(rc.dtype)
    wide = np.zeros((rc.batch, 2 * c) + rc.spatial, dtype=rc.dtype)
    wide[:, ::2] = dense
    strided = wide[:, ::2]
    p = ops.ConvParams(rng.standard_normal((rc.model.growth_rate, c, 3, 3)).astype(rc.dtype), 1, 1)
    t_contig = _median_ms(lambda: ops.conv2d_forward(Tensor(dense, ArenaTag.SCRATCH), p), rc.warmup, rc.iters)
    t_strided = _median_ms(lambda: ops.conv2d_forward(Tensor(strided, ArenaTag.SCRATCH), p), rc.warmup, rc.iters)
    sink.row("conv_ms_median", "contiguous", t_contig)
    sink.row("conv_ms_median", "non-contiguous", t_strided)
    sink.row("conv_time_ratio", "non-contiguous/contiguous", t_strided / t_contig)
    sink.row("reference_time_overhead_pct", "gpu", "15-20")
    sink.row("reference_bn_concat_share_pct", "gpu", "5")
    sink.row("reference_noncontiguous_overhead_pct", "gpu", "30-50")
    sink.publish()
    return EXIT_OK


def cmd_gradcheck(rc: RunConfig) -> int:
    tol = gradcheck.TOLERANCE[rc.dtype]
    results = dict(gradcheck.check_ops(rc.seed, rc.dtype))
    model = gradcheck.check_model(rc.model, batch=rc.batch, spatial=rc.spatial, seed=rc.seed, dtype=rc.dtype)
    results["model"] = model.max_rel_err
    sink = CsvSink(rc.out, ["op", "max_rel_err"])
    for name, err in results.items():
        sink.row(name, err)
    sink.publish()
    failed = {k: v for k, v in results.items() if not v < tol}
    log.info("model check: %d entries checked, %d excluded at ReLU kinks", model.checked, model.excluded)
    if failed:
        raise VerificationError(f"relative error above {tol:g}: {failed}")
    return EXIT_OK


def compare_strategies(model: DenseNetConfig, batch: int, spatial, seed: int, dtype) -> list[dict]:
    """One instrumented step per strategy on identical weights and data."""
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.standard_normal((batch, model.in_channels) + tuple(spatial)).astype(dtype)
    y = rng.integers(0, model.num_classes, batch)
    rows, ref = [], None
    for strategy in ExecutionStrategy:
        plan = build_plan(model, strategy, batch, x.shape, seed=seed, dtype=dtype)
        res = step_trace(plan, x, y)
        grads = {k: v.copy() for k, v in res.grads.items()}
        if ref is None:
            ref = (res.loss, grads)
        equal = res.loss == ref[0] and all(np.array_equal(grads[k], ref[1][k]) for k in grads)
        cb = [n.id for n in plan.nodes if n.kind in (NodeKind.CONCAT, NodeKind.BATCHNORM)]
        stats = res.stats
        rows.append({
            "strategy": strategy.value,
            "loss": res.loss,
            "equal": equal,
            "feature_peak_bytes": stats.total_feature_peak_bytes,
            "backward_alloc_bytes": stats.total_feature_peak_bytes - res.forward_feature_bytes,
            "shared_grad_bytes": stats.peak_bytes[ArenaTag.SHARED_GRAD],
            "param_bytes": stats.param_bytes,
            "forward_count": res.trace.total("forward"),
            "recompute_count": res.trace.total("recompute"),
            "concat_bn_recomputed": sum(res.trace.counts[i].recompute for i in cb),
            "recompute_flops": res.trace.phase_flops("recompute"),
            "total_flops": res.trace.total_flops(),
        })
        plan.close()
    return rows


def cmd_compare(rc: RunConfig) -> int:
    rows = compare_strategies(rc.model, rc.batch, rc.spatial, rc.seed, rc.dtype)
    header = list(rows[0])
    sink = CsvSink(rc.out, header)
    for r in rows:
        sink.row(*r.values())
    sink.publish()
    verdict = "PASS" if all(r["equal"] for r in rows) else "FAIL"
    stream = sys.stderr if rc.out is None else sys.stdout
    widths = [max(len(h), 12) for h in header]
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)), file=stream)
    for r in rows:
        print("  ".join(fmt(v)[:w].rjust(w) for v, w in zip(r.values(), widths)), file=stream)
    print(f"compare: {verdict}", file=stream)
    if verdict != "PASS":
        raise VerificationError("strategies disagree on loss or gradients")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "profile-mem": cmd_profile_mem,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
}


def _setup_logging() -> None:
    level = os.environ.get("DENSEPLAN_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        rc = resolve(args)
        return HANDLERS[rc.command](rc)
    except VerificationError as exc:
        print(f"denseplan: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (FormatError, LabelError) as exc:
        print(f"denseplan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ShapeError) as exc:
        print(f"denseplan: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"denseplan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DenseplanError as exc:
        print(f"denseplan: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
