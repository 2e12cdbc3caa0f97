"""General epochs (random-freeze SGD, then dense retraining) and full runs."""

from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import Dataset, gen_synthetic, load_csv, load_idx
from .errors import ConfigError
from .network import (
    EpochStats,
    Net,
    NetFeatureSource,
    accuracy,
    build_net,
    save_checkpoint,
    sgd_epoch,
)
from .retrain import RetrainReport, RetrainSettings, retrain_dense_stack
from .scheduler import FreezePlan, no_conv_plan, plan_epoch, rate_at

METRICS_COLUMNS = ("epoch", "step", "loss", "acc", "r_a", "l_a", "step1_ms", "step2_ms", "peak_bytes")
OUTPUT_DIR_ENV = "FASTRETRAIN_OUTPUT_DIR"


@dataclass
class GeneralEpochReport:
    epoch: int
    r_a: float
    plan: FreezePlan
    step1: EpochStats
    step2: RetrainReport | None
    test_acc: float | None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "r_a": self.r_a,
            "l_a": self.plan.l_a,
            "l_i": self.plan.l_i,
            "active_layers": sorted(self.plan.active_layers),
            "step1": asdict(self.step1),
            "step2": self.step2.to_dict() if self.step2 is not None else None,
            "test_acc": self.test_acc,
        }


def epoch_plan(net: Net, cfg: TrainConfig, epoch: int) -> tuple[float, FreezePlan]:
    r_a = rate_at(cfg.schedule(), epoch)
    if not net.conv_layers:
        return r_a, no_conv_plan(epoch)
    return r_a, plan_epoch(len(net.conv_layers), r_a, cfg.seed, epoch)


def retrain_settings(cfg: TrainConfig, epoch: int) -> RetrainSettings:
    return RetrainSettings(
        reg_c=cfg.retrain_reg_c,
        mu=cfg.retrain_mu,
        mp_batch_size=cfg.retrain_mp_batch_size,
        seed=int(np.random.SeedSequence([cfg.seed, epoch]).generate_state(1)[0]),
        pullback=cfg.retrain_pullback,
    )


def retrain_step(net: Net, train: Dataset, cfg: TrainConfig, epoch: int) -> RetrainReport:
    """Capture dense-layer inputs, refine the dense stack in place."""
    source = NetFeatureSource(net, train, chunk=cfg.retrain_mp_batch_size)
    layers, report = retrain_dense_stack(net.dense_layers, source, train.one_hot(), retrain_settings(cfg, epoch))
    net.dense_layers = layers
    return report


def general_epoch(
    net: Net, train: Dataset, cfg: TrainConfig, epoch: int, test: Dataset | None = None
) -> tuple[Net, GeneralEpochReport]:
    """Step 1: SGD with a random conv freeze plan. Step 2 (if enabled): dense retraining."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    r_a, plan = epoch_plan(net, cfg, epoch)
    net, step1 = sgd_epoch(net, train, cfg.sgd(), plan, epoch)
    step2 = retrain_step(net, train, cfg, epoch) if cfg.retrain_enabled else None
    test_acc = accuracy(net, test) if test is not None else None
    return net, GeneralEpochReport(epoch, r_a, plan, step1, step2, test_acc)


# datasets --------------------------------------------------------------------


def load_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset | None]:
    d = cfg.data
    if d.kind in ("blobs", "spirals"):
        train = gen_synthetic(d.kind, d.n_per_class, d.num_classes, d.noise, d.seed, d.image_shape)
        test = None
        if d.test_per_class > 0:
            # a fresh draw from the same generator family
            test = gen_synthetic(d.kind, d.test_per_class, d.num_classes, d.noise, d.seed + 7919, d.image_shape)
    elif d.kind == "idx":
        if not d.train_images or not d.train_labels:
            raise ConfigError("data.kind = idx needs data.train_images and data.train_labels")
        train = load_idx(d.train_images, d.train_labels, name="idx-train")
        test = load_idx(d.test_images, d.test_labels, train.num_classes, "idx-test") if d.test_images else None
    else:
        if not d.train_csv:
            raise ConfigError("data.kind = csv needs data.train_csv")
        train = load_csv(d.train_csv)
        test = load_csv(d.test_csv, train.num_classes) if d.test_csv else None
    train = train.subset(d.train_limit)
    if test is not None:
        test = test.subset(d.test_limit)
    return train, test


def make_net(cfg: TrainConfig, train: Dataset) -> Net:
    shape = train.input_shape if cfg.arch == "cnn-s" else (int(np.prod(train.input_shape)),)
    return build_net(cfg.arch, shape, train.num_classes, cfg.seed, cfg.hidden, cfg.retrain_dropout_rate)


def _flat_view(net: Net, ds: Dataset | None) -> Dataset | None:
    if ds is None or tuple(ds.input_shape) == tuple(net.input_shape):
        return ds
    return Dataset(ds.features.reshape((len(ds),) + tuple(net.input_shape)), ds.labels, ds.num_classes, ds.name)


# runs ------------------------------------------------------------------------


@dataclass
class RunSummary:
    rows: list[dict]
    reports: list[GeneralEpochReport]
    final_test_accuracy: float | None
    final_train_accuracy: float
    totals: dict

    def to_dict(self, cfg: TrainConfig | None = None) -> dict:
        out = {
            "config": cfg.to_text() if cfg is not None else None,
            "epochs": [r.to_dict() for r in self.reports],
            "metrics": [_numeric_row(r) for r in self.rows],
            "final_test_accuracy": self.final_test_accuracy,
            "final_train_accuracy": self.final_train_accuracy,
            "totals": self.totals,
        }
        return out


def _numeric_row(row: dict) -> dict:
    out = {}
    for k, v in row.items():
        if v == "":
            out[k] = None
        elif isinstance(v, str):
            out[k] = float(v)
        else:
            out[k] = v
    return out


def metrics_row(report: GeneralEpochReport, step: int, wall_clock: bool) -> dict:
    acc = report.test_acc if report.test_acc is not None else report.step1.train_acc
    return {
        "epoch": report.epoch,
        "step": step,
        "loss": f"{report.step1.loss:.10g}",
        "acc": f"{acc:.10g}",
        "r_a": f"{report.r_a:g}",
        "l_a": report.plan.l_a,
        "step1_ms": f"{report.step1.wall_ms:.3f}" if wall_clock else "",
        "step2_ms": f"{report.step2.duration_ms:.3f}" if wall_clock and report.step2 else ("0" if wall_clock else ""),
        "peak_bytes": report.step2.peak_bytes if report.step2 else 0,
    }


def format_metrics(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRICS_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def resolve_output_dir(cfg: TrainConfig) -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir)


def run_training(cfg: TrainConfig, out_dir: Path | None = None, log=None) -> RunSummary:
    """Run ``cfg.epochs`` general epochs; write artifacts when ``out_dir`` is given.

    Artifacts: ``metrics.csv``, ``timings.csv``, ``summary.json``,
    ``checkpoint.bin`` and ``config.resolved``.
    """
    train, test = load_datasets(cfg)
    net = make_net(cfg, train)
    train, test = _flat_view(net, train), _flat_view(net, test)
    rows, reports, timings = [], [], []
    step = 0
    for epoch in range(cfg.epochs):
        net, rep = general_epoch(net, train, cfg, epoch, test)
        step += rep.step1.steps
        rows.append(metrics_row(rep, step, cfg.metrics_wall_clock))
        timings.append(
            {
                "epoch": epoch,
                "step1_ms": rep.step1.wall_ms,
                "step2_ms": rep.step2.duration_ms if rep.step2 else 0.0,
            }
        )
        reports.append(rep)
        if log is not None:
            log(
                f"epoch {epoch}: loss={rep.step1.loss:.4f} r_a={rep.r_a:g} l_a={rep.plan.l_a} "
                f"acc={rows[-1]['acc']} step1={rep.step1.wall_ms:.0f}ms "
                f"step2={(rep.step2.duration_ms if rep.step2 else 0):.0f}ms"
            )
    totals = {
        "step1_ms": float(sum(t["step1_ms"] for t in timings)),
        "step2_ms": float(sum(t["step2_ms"] for t in timings)),
        "step1_peak_bytes": 0,
        "step2_peak_bytes": int(max((r.step2.peak_bytes for r in reports if r.step2), default=0)),
        "backward_flops": int(sum(r.step1.backward_flops for r in reports)),
    }
    summary = RunSummary(
        rows=rows,
        reports=reports,
        final_test_accuracy=reports[-1].test_acc,
        final_train_accuracy=accuracy(net, train),
        totals=totals,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.resolved").write_text(cfg.to_text())
        (out_dir / "metrics.csv").write_text(format_metrics(rows))
        with open(out_dir / "timings.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=("epoch", "step1_ms", "step2_ms"), lineterminator="\n")
            w.writeheader()
            w.writerows(timings)
        (out_dir / "summary.json").write_text(json.dumps(summary.to_dict(cfg), indent=2))
        save_checkpoint(net, out_dir / "checkpoint.bin")
    return summary


def summary_schema() -> dict:
    """JSON schema that every ``summary.json`` validates against."""
    from importlib.resources import files

    return json.loads(files("fastretrain").joinpath("summary.schema.json").read_text())
