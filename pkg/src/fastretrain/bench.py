"""Desk-scale benchmarks: solver memory, freeze speed-up, multi-seed comparisons."""

from __future__ import annotations

import copy
import csv
import io
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import linalg
from .config import TrainConfig, load_config
from .network import sgd_epoch
from .scheduler import active_count, no_conv_plan, plan_epoch
from .training import _flat_view, load_datasets, make_net, run_training

DIVERGENCE_LIMIT = linalg.ORACLE_RTOL


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# memory ----------------------------------------------------------------------


@dataclass
class MemoryRow:
    n: int
    d: int
    c: int
    batch_size: int
    batches: int
    one_shot_peak_bytes: int
    rls_peak_bytes: int
    peak_ratio: float
    divergence: float
    one_shot_ms: float
    rls_ms: float


def memory_data(n: int, d: int, c: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((n, d))
    e = h @ rng.standard_normal((d, c)) / np.sqrt(d) + 0.1 * rng.standard_normal((n, c))
    return h, e


def bench_memory(n: int, d: int, c: int, batch_sizes, reg_c: float = 4.0, seed: int = 0) -> list[MemoryRow]:
    """One-shot ridge vs batch-by-batch RLS on identical data, per batch size.

    Peak bytes are the solver's own transient matrices (see ``MemoryMeter``),
    so the numbers do not depend on the allocator or platform.
    """
    batch_sizes = [int(b) for b in batch_sizes]
    if not batch_sizes or min(batch_sizes) < 1:
        raise ValueError("batch sizes must be >= 1")
    if n < max(batch_sizes):
        raise ValueError(f"N = {n} is smaller than the largest batch size {max(batch_sizes)}")
    h, e = memory_data(n, d, c, seed)

    meter = linalg.MemoryMeter()
    t0 = time.perf_counter()
    ref = linalg.ridge_solve(h, e, reg_c, meter)
    one_ms = (time.perf_counter() - t0) * 1e3
    one_peak = meter.peak

    rows = []
    for b in batch_sizes:
        meter = linalg.MemoryMeter()
        t0 = time.perf_counter()
        state = linalg.rls_solve(((h[lo : lo + b], e[lo : lo + b]) for lo in range(0, n, b)), reg_c, meter)
        rls_ms = (time.perf_counter() - t0) * 1e3
        rows.append(
            MemoryRow(
                n=n,
                d=d,
                c=c,
                batch_size=b,
                batches=state.batches_seen,
                one_shot_peak_bytes=one_peak,
                rls_peak_bytes=meter.peak,
                peak_ratio=meter.peak / one_peak,
                divergence=linalg.relative_error(state.eta, ref),
                one_shot_ms=one_ms,
                rls_ms=rls_ms,
            )
        )
    return rows


# freeze ----------------------------------------------------------------------


@dataclass
class FreezeRow:
    rate: float
    l_a: int
    l_c: int
    epochs: int
    median_epoch_ms: float
    median_backward_flops: int
    flops_ratio: float
    time_ratio: float
    frozen_intact: bool


def _conv_snapshot(net) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(c.kernels.copy(), c.bias.copy()) for c in net.conv_layers]


def bench_freeze(cfg: TrainConfig, rates, epochs: int | None = None) -> list[FreezeRow]:
    """Step-1 epochs at constant activation rates from the same initial net.

    Every rate starts from a fresh net built with the config seed. After each
    epoch the conv layers left out of the plan are compared bit-for-bit with
    their state before the epoch; a mismatch raises ``AssertionError``.
    """
    rates = [float(r) for r in rates]
    if not rates or any(not 0.0 <= r <= 1.0 for r in rates):
        raise ValueError("rates must lie in [0, 1]")
    epochs = cfg.epochs if epochs is None else int(epochs)
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    train, _ = load_datasets(cfg)
    base = make_net(cfg, train)
    train = _flat_view(base, train)
    sgd = cfg.sgd()
    l_c = len(base.conv_layers)

    raw = []
    for rate in rates:
        net = copy.deepcopy(base)
        times, flops = [], []
        intact = True
        for epoch in range(epochs):
            plan = plan_epoch(l_c, rate, cfg.seed, epoch) if l_c else no_conv_plan(epoch)
            before = _conv_snapshot(net)
            net, stats = sgd_epoch(net, train, sgd, plan, epoch)
            for i, (k, b) in enumerate(before):
                if i not in plan.active_layers:
                    layer = net.conv_layers[i]
                    intact &= np.array_equal(k, layer.kernels) and np.array_equal(b, layer.bias)
            times.append(stats.wall_ms)
            flops.append(stats.backward_flops)
        if not intact:
            raise AssertionError(f"a frozen conv layer changed during a rate {rate} epoch")
        raw.append((rate, float(np.median(times)), int(np.median(flops)), intact))

    ref = next((r for r in raw if r[0] == 1.0), raw[0])
    return [
        FreezeRow(
            rate=rate,
            l_a=active_count(rate, l_c) if l_c else 0,
            l_c=l_c,
            epochs=epochs,
            median_epoch_ms=ms,
            median_backward_flops=fl,
            flops_ratio=fl / ref[2] if ref[2] else 1.0,
            time_ratio=ms / ref[1] if ref[1] else 1.0,
            frozen_intact=intact,
        )
        for rate, ms, fl, intact in raw
    ]


# compare ---------------------------------------------------------------------


@dataclass
class CompareRow:
    label: str
    seeds: tuple[int, ...]
    accuracies: tuple[float, ...]
    mean: float
    std: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["accuracies"] = list(self.accuracies)
        return d


def compare(configs: list[tuple[str, TrainConfig]], seeds, out_dir: Path | None = None) -> list[CompareRow]:
    """Final test accuracy, mean and population std over ``seeds``, per config.

    The seed drives the net init, shuffling and freeze plans; the dataset stays
    whatever the config names, so every config sees the same data.
    """
    if len(configs) < 2:
        raise ValueError("compare needs at least two configs")
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    rows = []
    for label, cfg in configs:
        accs = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed, data=copy.copy(cfg.data))
            run_dir = None if out_dir is None else Path(out_dir) / label / f"seed{seed}"
            summary = run_training(run_cfg, run_dir)
            acc = summary.final_test_accuracy
            accs.append(summary.final_train_accuracy if acc is None else acc)
        a = np.asarray(accs)
        rows.append(CompareRow(label, seeds, tuple(accs), float(a.mean()), float(a.std())))
    return rows


def load_labeled(paths) -> list[tuple[str, TrainConfig]]:
    """Configs keyed by file stem; repeated stems get a numeric suffix."""
    out, seen = [], {}
    for p in paths:
        stem = Path(p).stem
        seen[stem] = seen.get(stem, 0) + 1
        label = stem if seen[stem] == 1 else f"{stem}-{seen[stem]}"
        out.append((label, load_config(p)))
    return out
