"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they also show in the ``-v`` report because printing bypasses capture.
"""

import copy
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fastretrain.bench import bench_freeze, bench_memory, compare, load_labeled
from fastretrain.config import load_config
from fastretrain.data import gen_synthetic
from fastretrain.linalg import relative_error, ridge_solve, rls_init, rls_update
from fastretrain.network import ConvLayer, Net, NetFeatureSource, SgdConfig, build_net, loss_and_grads, sgd_epoch
from fastretrain.retrain import DenseLayer, RetrainSettings, pull_back_residual, retrain_dense_stack
from fastretrain.scheduler import active_count, plan_epoch
from fastretrain.training import format_metrics, run_training

CONFIGS = Path(__file__).parent.parent / "configs"
MNIST_ENV = "FASTRETRAIN_MNIST_DIR"


@pytest.fixture
def report(capsys):
    def emit(criterion: int, ok: bool, detail: str) -> bool:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        return ok

    return emit


def random_problem(rng):
    n = int(rng.integers(1, 501))
    d = int(rng.integers(1, 65))
    c = int(rng.integers(1, 11))
    reg = float(rng.choice([1.0, 2.0, 4.0, 10.0]))
    cuts = np.sort(rng.choice(np.arange(1, n), size=min(n - 1, int(rng.integers(0, 12))), replace=False)) if n > 1 else []
    edges = [0, *map(int, cuts), n]
    return rng.normal(size=(n, d)), rng.normal(size=(n, c)), reg, list(zip(edges, edges[1:]))


# 1 + 2 ------------------------------------------------------------------------


def test_oracle_equivalence_and_smw_identity(report):
    started = time.perf_counter()
    worst_eta = worst_smw = 0.0
    for seed in range(100):
        h, e, reg, spans = random_problem(np.random.default_rng(seed))
        d = h.shape[1]
        (lo, hi), rest = spans[0], spans[1:]
        state = rls_init(h[lo:hi], e[lo:hi], reg)
        gram = np.eye(d) / reg + h[lo:hi].T @ h[lo:hi]
        worst_smw = max(worst_smw, np.linalg.norm(state.r_inv @ gram - np.eye(d)) / np.linalg.norm(np.eye(d)))
        for lo, hi in rest:
            state = rls_update(state, h[lo:hi], e[lo:hi])
            gram += h[lo:hi].T @ h[lo:hi]
            worst_smw = max(worst_smw, np.linalg.norm(state.r_inv @ gram - np.eye(d)) / np.linalg.norm(np.eye(d)))
        worst_eta = max(worst_eta, relative_error(state.eta, ridge_solve(h, e, reg)))
    secs = time.perf_counter() - started
    first = report(1, worst_eta <= 1e-8 and secs < 10.0, f"max relative error {worst_eta:.2e} (limit 1e-8), {secs:.2f}s (limit 10s)")
    second = report(2, worst_smw <= 1e-7, f"max ||r_inv G - I|| / ||I|| {worst_smw:.2e} (limit 1e-7)")
    assert first and second


# 3 ----------------------------------------------------------------------------


def test_residual_reduction(report):
    worst = -np.inf
    for run in range(20):
        rng = np.random.default_rng(1000 + run)
        classes = int(rng.integers(2, 6))
        ds = gen_synthetic(str(rng.choice(["blobs", "spirals"])), int(rng.integers(10, 80)), classes, 0.3, run)
        hidden = tuple(int(w) for w in rng.integers(4, 40, size=int(rng.integers(1, 3))))
        net = build_net("mlp", (2,), classes, run, hidden)
        reg = tuple(float(rng.choice([0.5, 1.0, 4.0, 100.0])) for _ in range(len(hidden) + 1))
        settings = RetrainSettings(reg, 1.0, int(rng.integers(1, 200)), run, str(rng.choice(["after", "before"])))
        src = NetFeatureSource(net, ds)
        h_out = np.vstack([chunk[-1] for chunk in src.stream(10_000)])
        t = ds.one_hot()
        layers, rep = retrain_dense_stack(net.dense_layers, src, t, settings)
        before = np.linalg.norm(t - h_out @ net.dense_layers[-1].weights)
        after = np.linalg.norm(t - h_out @ layers[-1].weights)
        assert np.isclose(rep.layers[-1].residual_before, before) and np.isclose(rep.layers[-1].residual_after, after)
        worst = max(worst, after - before)
    assert report(3, worst <= 1e-12, f"max (after - before) over 20 runs {worst:.3e} (limit 1e-12)")


# 4 ----------------------------------------------------------------------------


def test_pullback_correctness(report):
    worst, negative = 0.0, False
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n, d_prev, d_next = (int(v) for v in rng.integers(1, 40, size=3))
        reg = float(rng.choice([1.0, 2.0, 4.0, 10.0]))
        a = rng.normal(size=(d_prev + 1, d_next))
        e = rng.normal(size=(n, d_next))
        oracle = np.maximum(e @ (np.linalg.inv(a.T @ a + np.eye(d_next) / reg) @ a.T)[:, :-1], 0.0)
        got = pull_back_residual(e, a, reg)
        worst = max(worst, relative_error(got, oracle))
        negative |= bool((got < 0).any())
    assert report(4, worst <= 1e-10 and not negative, f"max relative error {worst:.2e} (limit 1e-10), negatives: {negative}")


# 5 ----------------------------------------------------------------------------


def test_freeze_counting_and_integrity(report):
    bad = []
    for l_c in range(1, 65):
        for rate in (0.0, 0.25, 0.4, 0.5, 0.6, 0.75, 0.8, 0.9, 1.0):
            p = plan_epoch(l_c, rate, 0, 0)
            if p.l_a + p.l_i != l_c or p.l_a != active_count(rate, l_c) or len(p.active_layers) != p.l_a:
                bad.append((l_c, rate))
    changed = []
    ds = gen_synthetic("blobs", 8, 3, 0.2, 0, image_shape=(1, 12, 12))
    for rate in (0.0, 0.4, 0.6):
        net = build_net("cnn-s", (1, 12, 12), 3, 0, hidden=(16,))
        plan = plan_epoch(3, rate, 5, 0)
        before = copy.deepcopy(net)
        sgd_epoch(net, ds, SgdConfig(mini_batch=8), plan)
        for i in set(range(3)) - plan.active_layers:
            a, b = before.conv_layers[i], net.conv_layers[i]
            if a.kernels.tobytes() != b.kernels.tobytes() or a.bias.tobytes() != b.bias.tobytes():
                changed.append((rate, i))
    assert report(5, not bad and not changed, f"counting violations {len(bad)}, changed frozen layers {len(changed)}")


# 6 ----------------------------------------------------------------------------


def test_gradient_check(report):
    rng = np.random.default_rng(0)
    net = Net(
        (1, 5, 5),
        [ConvLayer(rng.normal(0, 0.5, (2, 1, 3, 3)), rng.normal(0, 0.1, 2))],
        [2],
        [DenseLayer(rng.normal(0, 0.5, (9, 6)), "relu"), DenseLayer(rng.normal(0, 0.5, (7, 3)), "linear")],
    )
    x, y = rng.random((6, 1, 5, 5)), np.array([0, 1, 2, 2, 1, 0])
    _, grads, _ = loss_and_grads(net, x, y, train=False)
    analytic = [*grads.conv[0], *grads.dense]
    eps = 1e-6
    worst = 0.0
    for param, a in zip(net.parameters(), analytic):
        num = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + eps
            up = loss_and_grads(net, x, y, train=False)[0]
            param[idx] = old - eps
            down = loss_and_grads(net, x, y, train=False)[0]
            param[idx] = old
            num[idx] = (up - down) / (2 * eps)
        worst = max(worst, np.linalg.norm(a - num) / np.linalg.norm(num))
    assert report(6, worst <= 1e-4, f"max relative gradient error over 4 parameter groups {worst:.2e} (limit 1e-4)")


# 7 ----------------------------------------------------------------------------


@pytest.mark.slow
def test_memory_analog(report):
    started = time.perf_counter()
    (row,) = bench_memory(50_000, 256, 10, [1024])
    secs = time.perf_counter() - started
    ok = row.peak_ratio <= 0.25 and row.divergence <= 1e-8 and secs < 120.0
    assert report(7, ok, f"peak ratio {row.peak_ratio:.3f} (limit 0.25), divergence {row.divergence:.1e} (limit 1e-8), {secs:.1f}s (limit 120s)")


# 8 ----------------------------------------------------------------------------


@pytest.mark.slow
def test_speed_analog(report):
    full, low = bench_freeze(load_config(CONFIGS / "cnn_freeze.cfg"), [1.0, 0.4], epochs=5)
    ok = low.flops_ratio <= 0.7 and low.time_ratio <= 0.9
    assert report(8, ok, f"FLOPs ratio {low.flops_ratio:.3f} (limit 0.7), epoch time ratio {low.time_ratio:.3f} (limit 0.9)")


# 9 ----------------------------------------------------------------------------


def mnist_pair():
    pair = load_labeled([CONFIGS / "mnist5k_sgd.cfg", CONFIGS / "mnist5k_fast.cfg"])
    root = os.environ.get(MNIST_ENV)
    if not root:
        return pair, "bundled 4000/1000 MNIST subset"
    names = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    out = []
    for label, cfg in pair:
        data = copy.copy(cfg.data)
        for field, stem in names.items():
            path = Path(root) / stem
            setattr(data, field, str(path if path.exists() else path.with_name(stem + ".gz")))
        data.train_limit, data.test_limit = 10_000, 2_000
        out.append((label, replace(cfg, data=data)))
    return out, f"MNIST 10000/2000 from {root}"


@pytest.mark.slow
def test_generalization_analog(report):
    started = time.perf_counter()
    mnist, mnist_name = mnist_pair()
    results = {}
    for name, pair in (("spirals", load_labeled([CONFIGS / "spirals_sgd.cfg", CONFIGS / "spirals_fast.cfg"])), (mnist_name, mnist)):
        sgd, fast = compare(pair, [0, 1, 2])
        results[name] = (sgd.mean, fast.mean)
    secs = time.perf_counter() - started
    within = all(f >= s - 0.005 for s, f in results.values())
    beats = any(f >= s for s, f in results.values())
    detail = "; ".join(f"{k}: SGD {s:.4f} vs fast {f:.4f}" for k, (s, f) in results.items())
    assert report(9, within and beats and secs < 1800, f"{detail}; {secs:.0f}s (limit 1800s)")


# 10 ---------------------------------------------------------------------------


def test_determinism(report):
    cfg = load_config(CONFIGS / "transfer_schedule.cfg")
    runs = [format_metrics(run_training(copy.deepcopy(cfg)).rows).encode() for _ in range(2)]
    assert report(10, runs[0] == runs[1], f"metrics.csv identical across repeated runs: {runs[0] == runs[1]}")
