"""``trajflow <synth|compress-bench|train|generate|eval>`` command line."""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import nn
from .conditioning import ConditionSpec, read_conditions
from .diffusion import NoiseSchedule, ddim_sample
from .flow import DegenerateSampleError, generate_batch
from .geo import DatasetFormatError, TransportMode, ZoneGrid, polyline_length_km, read_jsonl, write_jsonl
from .harmonize import BENCH_HEADER, Method, compression_benchmark, write_benchmark_csv
from .metrics import dataset_bbox, evaluate
from .model import TrainConfig, load_model, prepare, save_model
from .synth import Scale, load_split, load_world, make_dataset, make_world
from .training import train, write_history_csv

log = logging.getLogger("trajflow")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def side_file(path, suffix: str) -> Path:
    """``runs/foo.npz`` + ``.loss.csv`` -> ``runs/foo.loss.csv``."""
    path = Path(path)
    return path.with_name(path.stem + suffix)


def write_manifest(out, command: str, args: argparse.Namespace, inputs, outputs, timings: dict,
                   config: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "config": config,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
        "timings": {k: max(float(v), 0.0) for k, v in timings.items()},
    }
    path = side_file(out, ".manifest.json")
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    check_manifest(p)
    return p


def check_manifest(path: Path) -> None:
    """Compare ``path`` with the hash its producing run recorded, when that manifest is present."""
    manifest = side_file(path, ".manifest.json")
    if not manifest.is_file():
        return
    try:
        outputs = json.loads(manifest.read_text(encoding="utf-8")).get("outputs", {})
    except (json.JSONDecodeError, AttributeError):
        return
    for name, digest in outputs.items():
        if Path(name).name == path.name and sha256(path) != digest:
            raise RuntimeFailure(f"{path} does not match the hash recorded in {manifest}; "
                                 "the file is corrupted or was modified after it was written")


def _writable(path) -> Path:
    p = Path(path)
    if not p.parent.exists() or p.is_dir():
        raise UsageError(f"cannot write to {p}")
    return p


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# --- commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _writable(args.out)
    try:
        scale = Scale.parse(args.scale)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    t0 = time.perf_counter()
    world = make_world(args.seed, scale, args.curvature)
    trajs, split = make_dataset(world, args.n, np.random.default_rng([args.seed, 7]), out)
    elapsed = time.perf_counter() - t0
    write_manifest(out, "synth", args, [], [out, side_file(out, ".split.json"), side_file(out, ".world.json")],
                   {"total_sec": elapsed, "sec_per_sample": elapsed / len(trajs)},
                   {"scale": scale.value, "n": args.n, "curvature": args.curvature})
    print(f"wrote {len(trajs)} trajectories to {out} "
          f"(train/val/test {len(split['train'])}/{len(split['val'])}/{len(split['test'])})")
    return EXIT_OK


def cmd_compress_bench(args) -> int:
    data = _existing(args.data)
    out = _writable(args.out)
    try:
        methods = [Method.parse(m) for m in args.methods.split(",")] if args.methods else list(Method)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ks = _int_list(args.ks)
    trajs = read_jsonl(data)
    if args.limit:
        trajs = trajs[:args.limit]
    t0 = time.perf_counter()
    rows = compression_benchmark(trajs, methods, ks, args.L)
    write_benchmark_csv(out, rows)
    write_manifest(out, "compress-bench", args, [data], [out], {"total_sec": time.perf_counter() - t0},
                   {"methods": [m.value for m in methods], "ks": ks, "L": args.L})
    print(BENCH_HEADER)
    for row in rows:
        print(row.csv())
    return EXIT_OK


def _grid_for(data_path, trajs) -> ZoneGrid:
    world = load_world(data_path)
    if world is not None:
        return world.grid
    return ZoneGrid(dataset_bbox(trajs), 8, 8)


def cmd_train(args) -> int:
    data = _existing(args.data)
    out = _writable(args.out)
    try:
        cfg = TrainConfig.load(_existing(args.config)) if args.config else TrainConfig()
        overrides = {k: v for k, v in (("paradigm", args.paradigm), ("epochs", args.epochs),
                                         ("seed", args.seed)) if v is not None}
        cfg = dataclasses.replace(cfg, **overrides)
    except ValueError as exc:
        raise UsageError(f"config: {exc}") from None
    trajs = read_jsonl(data)
    split = load_split(data, trajs)
    grid = _grid_for(data, trajs)
    train_set, stats = prepare(split["train"], cfg.K, grid)
    val_set = prepare(split["val"], cfg.K, grid, stats)[0] if split["val"] else None

    resume = None
    if args.resume:
        model, _, _, header, arrays = load_model(_existing(args.resume))
        resume = {"model": model.state_dict(), "step": header["step"], "epoch": header.get("epoch", 0),
                  "lr": header.get("lr", cfg.lr), "rng_state": header.get("rng_state"),
                  "optimizer_state": {k: v for k, v in arrays.items() if k.startswith("adam.")}}

    def progress(rec):
        log.info("epoch %d step %d train %.5f val %s lr %.2e", rec["epoch"], rec["step"], rec["train_loss"],
                 f"{rec['val_loss']:.5f}" if "val_loss" in rec else "-", rec["lr"])

    t0 = time.perf_counter()
    result = train(train_set, val_set, cfg, grid.n_zones, resume=resume, progress=progress)
    elapsed = time.perf_counter() - t0
    save_model(out, result.model, stats, cfg, result.step, result.epoch, result.optimizer,
               {"paradigm": cfg.paradigm, "rng_state": result.rng_state})
    loss_csv = side_file(out, ".loss.csv")
    write_history_csv(loss_csv, result.history)
    write_manifest(out, "train", args, [data], [out, loss_csv],
                   {"total_sec": elapsed, "sec_per_step": elapsed / max(result.step, 1)},
                   dataclasses.asdict(cfg))
    last = result.history[-1] if result.history else {}
    print(f"trained {cfg.paradigm} to step {result.step} (epoch {result.epoch}); "
          f"final train loss {last.get('train_loss', float('nan')):.5f}; checkpoint {out}")
    return EXIT_OK


def _conditions(args, n_zones: int) -> list[ConditionSpec]:
    if args.conditions:
        specs = read_conditions(_existing(args.conditions))
    elif args.from_test_split:
        data = _existing(args.from_test_split)
        split = load_split(data, read_jsonl(data))
        source = split["test"] or split["train"]
        specs = [ConditionSpec.from_trajectory(t) for t in source]
    else:
        raise UsageError("give --conditions FILE or --from-test-split DATA")
    if not specs:
        raise UsageError("no conditions to generate from")
    for s in specs:
        s.validate(n_zones)
    n = args.n or len(specs)
    return [specs[i % len(specs)] for i in range(n)]


def sampler_for(paradigm: str, cfg: TrainConfig, steps: int, guidance: float):
    """``sample`` hook for :func:`generate_batch`; ``None`` means the Euler flow sampler."""
    if paradigm == "flow":
        return None
    schedule = NoiseSchedule.linear(cfg.T)
    return lambda model, cond, rng: ddim_sample(model, cond, steps, schedule, rng)


def cmd_generate(args) -> int:
    model_path = _existing(args.model)
    out = _writable(args.out)
    try:
        model, stats, cfg, header, _ = load_model(model_path, args.expect_hash)
    except nn.CheckpointError as exc:
        raise UsageError(str(exc)) from None
    paradigm = header.get("paradigm", cfg.paradigm)
    steps = args.steps or cfg.sample_steps
    if paradigm == "ddpm" and not 1 <= steps <= cfg.T:
        raise UsageError(f"--steps must lie in [1, {cfg.T}] for a diffusion model")
    specs = _conditions(args, stats.grid.n_zones)
    rng = np.random.default_rng([args.seed, 3])
    sample = sampler_for(paradigm, cfg, steps, args.guidance)
    t0 = time.perf_counter()
    trajs = []
    for lo in range(0, len(specs), args.batch):
        trajs += generate_batch(model, stats, specs[lo:lo + args.batch], args.L, steps, args.guidance, rng,
                                sample=sample)
    elapsed = time.perf_counter() - t0
    write_jsonl(out, trajs)
    inputs = [model_path] + [Path(p) for p in (args.conditions, args.from_test_split) if p]
    write_manifest(out, "generate", args, inputs, [out],
                   {"sampling_sec": elapsed, "sec_per_sample": elapsed / len(trajs)},
                   {"paradigm": paradigm, "steps": steps, "guidance": args.guidance, "n": len(trajs), "L": args.L})
    print(f"generated {len(trajs)} trajectories with {paradigm}@{steps} in {elapsed:.2f}s "
          f"({elapsed / len(trajs) * 1e3:.2f} ms/sample) -> {out}")
    return EXIT_OK


def mode_distances(trajs) -> dict[str, float]:
    """Mean trip distance (km) per transport mode present in ``trajs``."""
    acc: dict[str, list[float]] = {}
    for t in trajs:
        acc.setdefault(t.mode.name, []).append(polyline_length_km(t.latlon))
    return {m.name: float(np.mean(acc[m.name])) for m in TransportMode if m.name in acc}


def _parse_bins(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    try:
        bins = tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise UsageError(f"--bins expects N or RxC, got {text!r}") from None
    if len(bins) == 1:
        bins = bins * 2
    if len(bins) != 2 or min(bins) < 1:
        raise UsageError(f"--bins expects N or RxC, got {text!r}")
    return bins


def _overlap(a, b) -> bool:
    return a[0] <= b[1] and b[0] <= a[1] and a[2] <= b[3] and b[2] <= a[3]


def cmd_eval(args) -> int:
    real_path, gen_path = _existing(args.real), _existing(args.generated)
    out = _writable(args.out)
    bins = _parse_bins(args.bins)
    real, gen = read_jsonl(real_path), read_jsonl(gen_path)
    if args.split:
        real = load_split(real_path, real).get(args.split) or real
    if not real or not gen:
        raise RuntimeFailure("both datasets must contain at least one trajectory")
    bbox_real, bbox_gen = dataset_bbox(real), dataset_bbox(gen)
    if not _overlap(bbox_real, bbox_gen):
        raise RuntimeFailure(f"bounding boxes do not intersect: real {bbox_real}, generated {bbox_gen}")
    t0 = time.perf_counter()
    report = evaluate(real, gen, bbox_real, bins)
    real_modes, gen_modes = mode_distances(real), mode_distances(gen)
    payload = {**report.to_flat(), "per_mode_mean_km": {"real": real_modes, "generated": gen_modes}}
    out.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    modes_csv = side_file(out, ".modes.csv")
    with open(modes_csv, "w", encoding="utf-8") as fh:
        fh.write("mode,real_mean_km,generated_mean_km\n")
        for m in TransportMode:
            r, g = real_modes.get(m.name), gen_modes.get(m.name)
            fh.write(f"{m.name},{'' if r is None else f'{r:.6f}'},{'' if g is None else f'{g:.6f}'}\n")
    write_manifest(out, "eval", args, [real_path, gen_path], [out, modes_csv],
                   {"total_sec": time.perf_counter() - t0}, {"bins": list(bins)})
    print(json.dumps(report.to_flat(), indent=1))
    print(modes_csv.read_text(encoding="utf-8"), end="")
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    p = argparse.ArgumentParser(prog="trajflow", description="Trajectory generation with conditional flow matching.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="sample a synthetic trajectory dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scale", default="urban", help="urban, metro or nationwide")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--curvature", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("compress-bench", parents=[common], help="reconstruction error of the keypoint parameterizations")
    s.add_argument("--data", required=True)
    s.add_argument("--methods", default="", help="comma-separated; default all")
    s.add_argument("--ks", default="5,10,20,30")
    s.add_argument("--L", type=int, default=120)
    s.add_argument("--limit", type=int, default=0, help="use only the first N trajectories")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compress_bench)

    s = sub.add_parser("train", parents=[common], help="train a flow or diffusion model")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--paradigm", choices=("flow", "ddpm"))
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", parents=[common], help="sample trajectories from a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--conditions")
    s.add_argument("--from-test-split", metavar="DATA")
    s.add_argument("--n", type=int, default=0)
    s.add_argument("--steps", type=int, default=0)
    s.add_argument("--guidance", type=float, default=0.0)
    s.add_argument("--L", type=int, default=120)
    s.add_argument("--batch", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--expect-hash", help="refuse checkpoints with a different architecture hash")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("eval", parents=[common], help="compare generated trajectories against real ones")
    s.add_argument("--real", required=True)
    s.add_argument("--generated", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), help="restrict the real set to one split")
    s.add_argument("--bins", default="64x64")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)
    return p


@contextlib.contextmanager
def thread_limit():
    value = os.environ.get("TRAJFLOW_THREADS")
    if not value:
        yield
        return
    from threadpoolctl import threadpool_limits

    n = int(value)
    if n < 1:
        raise UsageError("TRAJFLOW_THREADS must be a positive integer")
    with threadpool_limits(limits=n):
        yield


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except (UsageError, DatasetFormatError, nn.CheckpointError, ValueError) as exc:
        print(f"trajflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeFailure, nn.TrainingAbort, DegenerateSampleError, FloatingPointError, OSError) as exc:
        print(f"trajflow {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
