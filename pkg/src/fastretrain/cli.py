"""Command-line entry point: ``fastretrain <subcommand> ...``.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 training
diverged, 4 I/O or data-format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, bench
from .config import apply_setting, load_config
from .data import gen_synthetic, save_csv, write_idx
from .errors import CheckpointError, ConfigError, DataFormatError, DivergenceError
from .network import accuracy, load_checkpoint
from .training import _flat_view, load_datasets, resolve_output_dir, run_training

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _load(path, overrides=()):
    cfg = load_config(path)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        apply_setting(cfg, key, value)
    return cfg.validate()


def _write(out: Path | None, name: str, text: str) -> None:
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _table(rows: list[dict], cols: list[str]) -> str:
    cells = [[_cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


# subcommands -----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load(args.config, args.set)
    out = Path(args.out) if args.out else resolve_output_dir(cfg)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    summary = run_training(cfg, out, log)
    acc = summary.final_test_accuracy
    print(f"final test accuracy: {acc:.4f}" if acc is not None else f"final train accuracy: {summary.final_train_accuracy:.4f}")
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_bench_memory(args) -> int:
    rows = bench.bench_memory(args.n, args.d, args.c, args.batch_sizes, args.reg_c, args.seed)
    dicts = [asdict(r) for r in rows]
    out = Path(args.out) if args.out else None
    _write(out, "memory.csv", bench.to_csv(dicts))
    _write(out, "memory.json", json.dumps(dicts, indent=2))
    print(_table(dicts, ["batch_size", "batches", "one_shot_peak_bytes", "rls_peak_bytes", "peak_ratio", "divergence", "rls_ms"]))
    bad = [r.batch_size for r in rows if r.divergence > bench.DIVERGENCE_LIMIT]
    if bad:
        print(f"divergence above {bench.DIVERGENCE_LIMIT:g} for batch sizes {bad}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_bench_freeze(args) -> int:
    cfg = _load(args.config, args.set)
    try:
        rows = bench.bench_freeze(cfg, args.rates, args.epochs)
    except AssertionError as exc:
        print(f"freeze integrity check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    dicts = [asdict(r) for r in rows]
    out = Path(args.out) if args.out else None
    _write(out, "freeze.csv", bench.to_csv(dicts))
    _write(out, "freeze.json", json.dumps(dicts, indent=2))
    print(_table(dicts, ["rate", "l_a", "l_c", "median_epoch_ms", "median_backward_flops", "flops_ratio", "time_ratio"]))
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.configs) < 2:
        raise ConfigError("compare needs at least two configs")
    configs = bench.load_labeled(args.configs)
    for _, cfg in configs:
        for item in args.set:
            key, _, value = item.partition("=")
            apply_setting(cfg, key, value)
        cfg.validate()
    out = Path(args.out) if args.out else None
    rows = bench.compare(configs, args.seeds, out)
    dicts = [r.to_dict() for r in rows]
    flat = [
        {"config": r.label, "seeds": len(r.seeds), "mean": r.mean, "std": r.std, "mean_pm_std": f"{r.mean:.4f} ± {r.std:.4f}"}
        for r in rows
    ]
    _write(out, "compare.csv", bench.to_csv(flat))
    _write(out, "compare.json", json.dumps(dicts, indent=2))
    print(_table(flat, ["config", "seeds", "mean_pm_std"]))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    shape = tuple(args.image_shape) if args.image_shape else None
    if args.format == "idx" and (shape is None or shape[0] != 1):
        raise ConfigError("--format idx needs --image-shape 1,H,W")
    ds = gen_synthetic(args.kind, args.n_per_class, args.num_classes, args.noise, args.seed, shape)
    out = Path(args.out)
    if args.format == "csv":
        out.parent.mkdir(parents=True, exist_ok=True)
        save_csv(ds, out)
        print(f"wrote {len(ds)} rows to {out}")
    else:
        out.mkdir(parents=True, exist_ok=True)
        images = np.rint(ds.features[:, 0] * 255).astype(np.uint8)
        write_idx(images, ds.labels, out / "images-idx3-ubyte", out / "labels-idx1-ubyte")
        print(f"wrote {len(ds)} images to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args.config, args.set)
    net = load_checkpoint(args.checkpoint)
    train, test = load_datasets(cfg)
    ds = test if args.split == "test" else train
    if ds is None:
        raise ConfigError("the config defines no test set; use --split train")
    ds = _flat_view(net, ds)
    result = {"split": args.split, "samples": len(ds), "accuracy": accuracy(net, ds)}
    print(json.dumps(result))
    return EXIT_OK


# parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastretrain", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    t = sub.add_parser("train", help="run general epochs and write artifacts")
    with_config(t)
    t.add_argument("--out", help="output directory (default: $FASTRETRAIN_OUTPUT_DIR, then output_dir)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("bench-memory", help="one-shot vs batch-by-batch solver memory")
    m.add_argument("--n", type=int, default=50_000)
    m.add_argument("--d", type=int, default=256)
    m.add_argument("--c", type=int, default=10)
    m.add_argument("--batch-sizes", type=_ints, default=[1024])
    m.add_argument("--reg-c", type=float, default=4.0)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out")
    m.set_defaults(func=cmd_bench_memory)

    f = sub.add_parser("bench-freeze", help="step-1 cost at constant activation rates")
    with_config(f)
    f.add_argument("--rates", type=_floats, default=[1.0, 0.8, 0.6, 0.4])
    f.add_argument("--epochs", type=int, help="epochs per rate (default: config epochs)")
    f.add_argument("--out")
    f.set_defaults(func=cmd_bench_freeze)

    c = sub.add_parser("compare", help="mean and std of final accuracy over seeds")
    c.add_argument("--configs", nargs="+", required=True)
    c.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a key in every config")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gen-data", help="write a seeded synthetic dataset")
    g.add_argument("--kind", choices=["blobs", "spirals"], default="blobs")
    g.add_argument("--n-per-class", type=int, default=200)
    g.add_argument("--num-classes", type=int, default=3)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-shape", type=_ints, help="render points as C,H,W images")
    g.add_argument("--format", choices=["csv", "idx"], default="csv")
    g.add_argument("--out", required=True, help="CSV file, or directory for idx")
    g.set_defaults(func=cmd_gen_data)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on the config's data")
    with_config(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=["test", "train"], default="test")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, DataFormatError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
