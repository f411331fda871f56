"""Command-line surface: train, eval, bench, flops, analyze-freq, gen-data,
export.

Exit codes: 0 success, 1 validation error (bad flags, malformed inputs),
2 unexpected runtime failure. All outputs are CSV or plain key=value lines;
nothing binary goes to stdout. Every source of randomness is derived from
the single ``--seed`` flag. ``BINSPOT_THREADS`` caps benchmark parallelism.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, serial, train
from .bitkernel import KernelBlocking, bench_kernel, bench_report_csv
from .data import FormatError, gen_toy_dataset, load_features, save_features
from .model import (
    MemoryBlockConfig,
    ModelConfig,
    ThinnableFsmn,
    desk_config,
    make_teacher,
)


class CliError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise CliError(message)


def _parse_int_tuple(text: str, flag: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError as e:
        raise CliError(f"{flag} expects comma-separated integers: {e}") from None


def _build_config(args, num_classes: int, t: int, f: int) -> ModelConfig:
    # --toy runs default to the desk-scale preset; explicit flags win.
    toy = getattr(args, "toy", False)
    base = desk_config(num_classes, t, f) if toy else ModelConfig(
        num_classes=num_classes, input_time=t, input_freq=f
    )
    dims = {
        "backbone_dim": args.backbone_dim or base.backbone_dim,
        "hidden_dim": args.hidden_dim or base.hidden_dim,
        "head_channels": (
            _parse_int_tuple(args.head_channels, "--head-channels")
            if args.head_channels
            else base.head_channels
        ),
    }
    memory = MemoryBlockConfig(
        n_back=base.memory.n_back if args.mem_back is None else args.mem_back,
        n_ahead=base.memory.n_ahead if args.mem_ahead is None else args.mem_ahead,
    )
    return ModelConfig(
        num_classes=num_classes,
        num_blocks=args.blocks,
        delta_set=_parse_int_tuple(args.delta_set, "--delta-set"),
        input_time=t,
        input_freq=f,
        memory=memory,
        **dims,
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--blocks", type=int, default=4, help="number of backbone blocks")
    p.add_argument("--delta-set", default="1,2,4", help="runtime variants, e.g. 1,2,4")
    p.add_argument("--backbone-dim", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--head-channels", default=None, help="e.g. 16,16")
    p.add_argument("--mem-back", type=int, default=None, help="look-back tap order")
    p.add_argument("--mem-ahead", type=int, default=None, help="look-ahead tap order")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--features", help="feature file (BFTR)")
    p.add_argument("--toy", action="store_true", help="use the generated toy dataset")
    p.add_argument("--classes", type=int, default=4, help="toy classes")
    p.add_argument("--per-class", type=int, default=200, help="toy examples per class")
    p.add_argument("--time", type=int, default=32, help="toy time steps")
    p.add_argument("--freq", type=int, default=40, help="toy frequency bins")
    p.add_argument("--noise", type=float, default=0.3, help="toy noise sigma")


def _load_dataset(args, split: str = "train"):
    if args.features:
        return load_features(args.features, split=split)
    if args.toy:
        return gen_toy_dataset(
            args.seed, num_classes=args.classes, per_class=args.per_class,
            time_steps=args.time, freq_bins=args.freq, noise=args.noise, split=split,
        )
    raise CliError("either --features or --toy is required")


def cmd_gen_data(args) -> int:
    ds = gen_toy_dataset(
        args.seed, num_classes=args.classes, per_class=args.per_class,
        time_steps=args.time, freq_bins=args.freq, noise=args.noise, split=args.split,
    )
    save_features(args.out, ds)
    print(f"wrote {len(ds)} examples ({ds.num_classes} classes, "
          f"{ds.time_steps}x{ds.freq_bins}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = _load_dataset(args, split="train")
    config = _build_config(args, ds.num_classes, ds.time_steps, ds.freq_bins)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = train.TrainConfig(
        epochs=args.epochs, base_lr=args.lr, momentum=args.momentum,
        gamma=args.gamma, batch_size=args.batch_size, seed=args.seed,
    )
    teacher = None
    if cfg.gamma > 0:
        if args.teacher:
            teacher, _, _ = serial.load_checkpoint(args.teacher)
        else:
            teacher = make_teacher(config, seed=args.seed)
            t_cfg = train.TrainConfig(
                epochs=args.teacher_epochs, base_lr=args.lr, momentum=args.momentum,
                gamma=0.0, batch_size=args.batch_size, seed=args.seed,
            )
            train.run_training(teacher, None, ds, t_cfg)
            serial.save_checkpoint(out_dir / "teacher.ckpt", teacher,
                                   epoch=args.teacher_epochs)
    model = ThinnableFsmn(
        config, seed=args.seed, binarized=True,
        binarizer_kind=args.binarizer, dual_scale=args.scale == "dual",
    )
    with open(out_dir / "metrics.csv", "w") as fh:
        train.run_training(model, teacher, ds, cfg, metrics_fh=fh)
    serial.save_checkpoint(out_dir / "student.ckpt", model, epoch=cfg.epochs)
    for delta in config.delta_set:
        acc = train.evaluate(model, ds, delta)
        print(f"train_accuracy,delta={delta},{acc:.4f}")
    print(f"checkpoint={out_dir / 'student.ckpt'}")
    print(f"metrics={out_dir / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.packed):
        raise CliError("exactly one of --checkpoint or --packed is required")
    if args.checkpoint:
        model, _, _ = serial.load_checkpoint(args.checkpoint)
        mode = None
    else:
        model = serial.load_packed(args.packed)
        mode = "packed"
    ds = _load_dataset(args, split=args.split)
    cfg = model.config
    if (ds.time_steps, ds.freq_bins) != (cfg.input_time, cfg.input_freq):
        raise CliError(
            f"feature dims {ds.time_steps}x{ds.freq_bins} do not match model "
            f"{cfg.input_time}x{cfg.input_freq}"
        )
    deltas = [args.delta] if args.delta is not None else list(cfg.delta_set)
    print("delta,accuracy")
    for delta in deltas:
        acc = train.evaluate(model, ds, delta, mode=mode)
        print(f"{delta},{acc:.6f}")
    return 0


def _parse_sizes(text: str) -> list[tuple[int, int, int]]:
    sizes = []
    for item in text.split(","):
        parts = item.lower().split("x")
        if len(parts) != 3:
            raise CliError(f"size {item!r} is not of the form MxNxK")
        sizes.append(tuple(int(p) for p in parts))
    return sizes


def cmd_bench(args) -> int:
    threads = int(os.environ.get("BINSPOT_THREADS", "1"))
    rows = bench_kernel(
        _parse_sizes(args.sizes), repeats=args.repeats, seed=args.seed,
        blocking=KernelBlocking(inner_unroll=args.inner_unroll), threads=threads,
    )
    csv = bench_report_csv(rows)
    if args.out:
        Path(args.out).write_text(csv)
    else:
        sys.stdout.write(csv)
    return 0


def cmd_flops(args) -> int:
    config = _build_config(args, args.num_classes, args.time, args.freq)
    report = analysis.flops_report(config, mode=args.mode, delta=args.delta)
    csv = analysis.flops_csv(report)
    if args.out:
        Path(args.out).write_text(csv)
    else:
        sys.stdout.write(csv)
    return 0


def cmd_analyze_freq(args) -> int:
    model, _, _ = serial.load_checkpoint(args.checkpoint)
    teacher, _, _ = serial.load_checkpoint(args.teacher)
    ds = _load_dataset(args, split=args.split)
    sample = ds.features[: args.sample]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    freq_rows = analysis.freq_energy_report(model, teacher, sample, delta=args.delta)
    (out_dir / "freq.csv").write_text(analysis.freq_csv(freq_rows))
    qerr_rows = analysis.quant_error_report(model, sample, delta=args.delta)
    (out_dir / "qerr.csv").write_text(analysis.qerr_csv(qerr_rows))
    print(f"wrote {out_dir / 'freq.csv'} and {out_dir / 'qerr.csv'}")
    return 0


def cmd_export(args) -> int:
    model, _, _ = serial.load_checkpoint(args.checkpoint)
    serial.export_packed(args.out, model)
    print(f"packed bundle written to {args.out}")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="binspot", description=__doc__)
    p.add_argument("--seed", type=int, default=0, help="global random seed")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate a toy feature file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--per-class", type=int, default=200)
    sp.add_argument("--time", type=int, default=32)
    sp.add_argument("--freq", type=int, default=40)
    sp.add_argument("--noise", type=float, default=0.3)
    sp.add_argument("--split", default="train")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train the binarized student (Algorithm-style loop)")
    _add_data_flags(sp)
    _add_model_flags(sp)
    sp.add_argument("--out-dir", default="out")
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--gamma", type=float, default=0.01, help="distillation weight")
    sp.add_argument("--teacher", help="pretrained teacher checkpoint (trains one if absent)")
    sp.add_argument("--teacher-epochs", type=int, default=10)
    sp.add_argument("--binarizer", choices=("lpb", "ste"), default="lpb")
    sp.add_argument("--scale", choices=("dual", "single"), default="dual")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="accuracy of a checkpoint per runtime variant")
    _add_data_flags(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--packed", help="packed bundle instead of a checkpoint")
    sp.add_argument("--delta", type=int, default=None)
    sp.add_argument("--split", default="test")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("bench", help="microbenchmark the bit kernels")
    sp.add_argument("--sizes", default="256x4096x256", help="comma list of MxNxK")
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--inner-unroll", type=int, default=16)
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("flops", help="FLOPs report for a configuration")
    _add_model_flags(sp)
    sp.add_argument("--mode", choices=analysis.MODES, default="dual_scale")
    sp.add_argument("--delta", type=int, default=1)
    sp.add_argument("--num-classes", type=int, default=12)
    sp.add_argument("--time", type=int, default=32)
    sp.add_argument("--freq", type=int, default=40)
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp.set_defaults(fn=cmd_flops)

    sp = sub.add_parser("analyze-freq", help="wavelet-energy and quantization-error CSVs")
    _add_data_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--delta", type=int, default=1)
    sp.add_argument("--sample", type=int, default=64)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out-dir", default="out")
    sp.set_defaults(fn=cmd_analyze_freq)

    sp = sub.add_parser("export", help="checkpoint -> packed inference bundle")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (CliError, FormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # pragma: no cover - defensive
        print(f"internal error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
