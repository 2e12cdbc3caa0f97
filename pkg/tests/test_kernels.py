import os
import subprocess
import sys

import numpy as np
import pytest

from fastretrain import kernels

needs_numba = pytest.mark.skipif("numba" not in kernels.BACKENDS, reason="numba not installed")


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for y in range(ho):
                for z in range(wo):
                    patch = xp[i, :, y * stride : y * stride + k, z * stride : z * stride + k]
                    out[i, o, y, z] = np.sum(patch * w[o]) + b[o]
    return out


def naive_pool(x, p):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // p, w // p))
    for i in range(n):
        for j in range(c):
            for y in range(h // p):
                for z in range(w // p):
                    out[i, j, y, z] = x[i, j, y * p : y * p + p, z * p : z * p + p].max()
    return out


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    return kernels.BACKENDS[request.param]


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
def test_conv_forward_matches_loops(backend, stride, pad):
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    np.testing.assert_allclose(backend["conv_forward"](x, w, b, stride, pad), naive_conv(x, w, b, stride, pad), atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
def test_conv_backward_is_adjoint(backend, stride, pad):
    # <conv(x), g> is bilinear, so its gradients must satisfy the adjoint identities
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(4, 3, 3, 3))
    zero = np.zeros(4)
    g = rng.normal(size=backend["conv_forward"](x, w, zero, stride, pad).shape)
    base = np.sum(backend["conv_forward"](x, w, zero, stride, pad) * g)
    dw, db = backend["conv_backward_weight"](g, x, w.shape, stride, pad)
    dx = backend["conv_backward_input"](g, w, x.shape, stride, pad)
    assert np.isclose(np.sum(dw * w), base, rtol=1e-10)
    np.testing.assert_allclose(db, g.sum(axis=(0, 2, 3)), rtol=1e-12)
    assert np.isclose(np.sum(dx * x), base, rtol=1e-10)


def test_maxpool_forward_backward(backend):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 6, 4))
    out, idx = backend["maxpool_forward"](x, 2)
    np.testing.assert_array_equal(out, naive_pool(x, 2))
    g = rng.normal(size=out.shape)
    dx = backend["maxpool_backward"](g, idx, x.shape, 2)
    # each window routes its gradient to the argmax position only
    assert np.isclose(dx.sum(), g.sum())
    assert np.count_nonzero(dx) == g.size
    np.testing.assert_array_equal(dx[dx != 0], np.sort(g.ravel())[np.argsort(np.argsort(dx[dx != 0]))])


def test_maxpool_odd_size_drops_border(backend):
    x = np.arange(25, dtype=float).reshape(1, 1, 5, 5)
    out, idx = backend["maxpool_forward"](x, 2)
    assert out.shape == (1, 1, 2, 2)
    dx = backend["maxpool_backward"](np.ones_like(out), idx, x.shape, 2)
    assert dx[0, 0, 4].sum() == 0 and dx[0, 0, :, 4].sum() == 0


@needs_numba
def test_backends_agree():
    rng = np.random.default_rng(3)
    nb, npb = kernels.BACKENDS["numba"], kernels.BACKENDS["numpy"]
    x, w, b = rng.normal(size=(4, 8, 10, 10)), rng.normal(size=(16, 8, 3, 3)), rng.normal(size=16)
    y = npb["conv_forward"](x, w, b, 1, 1)
    np.testing.assert_allclose(nb["conv_forward"](x, w, b, 1, 1), y, rtol=1e-10, atol=1e-10)
    g = rng.normal(size=y.shape)
    for a, b_ in zip(nb["conv_backward_weight"](g, x, w.shape, 1, 1), npb["conv_backward_weight"](g, x, w.shape, 1, 1)):
        np.testing.assert_allclose(a, b_, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(
        nb["conv_backward_input"](g, w, x.shape, 1, 1), npb["conv_backward_input"](g, w, x.shape, 1, 1), rtol=1e-10, atol=1e-10
    )
    o1, i1 = nb["maxpool_forward"](y, 2)
    o2, i2 = npb["maxpool_forward"](y, 2)
    assert np.array_equal(o1, o2) and np.array_equal(i1, i2)


def test_use_backend_switches_and_rejects_unknown():
    before = kernels.backend
    try:
        kernels.use_backend("numpy")
        assert kernels.conv_forward is kernels.conv_forward_np
        with pytest.raises(ValueError):
            kernels.use_backend("fortran")
    finally:
        kernels.use_backend(before)


@pytest.mark.parametrize("flag,want", [("1", "numpy"), ("true", "numpy"), ("0", None)])
def test_env_flag_selects_backend(flag, want):
    env = dict(os.environ, FASTRETRAIN_DISABLE_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from fastretrain import kernels; print(kernels.backend)"],
        env=env, capture_output=True, text=True, check=True,
    ).stdout.strip()
    expected = want or ("numba" if "numba" in kernels.BACKENDS else "numpy")
    assert out == expected


def test_kernel_benchmark_runs(capsys):
    import runpy
    from pathlib import Path

    script = Path(__file__).parent.parent / "benchmarks" / "bench_kernels.py"
    runpy.run_path(str(script))["main"](["--batch", "2", "--size", "8", "--repeats", "1"])
    out = capsys.readouterr().out
    assert all(name in out for name in kernels.BACKENDS["numpy"])
