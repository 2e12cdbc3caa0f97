"""Convolution and max-pool kernels.

Each kernel has a numba ``@njit`` implementation and a pure-numpy one with the
same signature. The numba path is used when numba imports and the environment
variable ``FASTRETRAIN_DISABLE_NUMBA`` is unset or ``0``; :func:`use_backend`
switches at runtime (benchmarks and equivalence tests use it).

Layouts: images ``(N, C, H, W)``, kernels ``(F, C, k, k)``, all float64.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


# numpy -----------------------------------------------------------------------


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def conv_forward_np(x, w, b, stride, pad):
    k = w.shape[2]
    ho = conv_out_size(x.shape[2], k, stride, pad)
    wo = conv_out_size(x.shape[3], k, stride, pad)
    win = _windows(_pad(x, pad), k, stride, ho, wo)  # N, C, ho, wo, k, k
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, ho, wo, F
    out += b
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv_backward_weight_np(dout, x, w_shape, stride, pad):
    k = w_shape[2]
    ho, wo = dout.shape[2], dout.shape[3]
    win = _windows(_pad(x, pad), k, stride, ho, wo)
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # F, C, k, k
    return np.ascontiguousarray(dw), dout.sum(axis=(0, 2, 3))


def conv_backward_input_np(dout, w, x_shape, stride, pad):
    n, c, h, wd = x_shape
    k = w.shape[2]
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0]))  # N, ho, wo, C
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + wd])


def maxpool_forward_np(x, p):
    n, c, h, w = x.shape
    ho, wo = h // p, w // p
    blocks = x[:, :, : ho * p, : wo * p].reshape(n, c, ho, p, wo, p).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, p * p)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_backward_np(dout, idx, x_shape, p):
    n, c, h, w = x_shape
    ho, wo = dout.shape[2], dout.shape[3]
    blocks = np.zeros((n, c, ho, wo, p * p))
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(n, c, ho, wo, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * p, wo * p)
    dx = np.zeros(x_shape)
    dx[:, :, : ho * p, : wo * p] = blocks
    return dx


# numba -----------------------------------------------------------------------

if HAVE_NUMBA:

    # convolutions are im2col / col2im loops around a BLAS matmul

    @numba.njit(cache=True)
    def _im2col(xp, k, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((n * ho * wo, c * k * k))
        for s in range(n):
            for y in range(ho):
                for z in range(wo):
                    r = (s * ho + y) * wo + z
                    q = 0
                    for ch in range(c):
                        for i in range(k):
                            src = xp[s, ch, y * stride + i]
                            for j in range(k):
                                cols[r, q] = src[z * stride + j]
                                q += 1
        return cols

    @numba.njit(cache=True)
    def _col2im(dcols, n, c, hp, wp, k, stride, ho, wo):
        dxp = np.zeros((n, c, hp, wp))
        for s in range(n):
            for y in range(ho):
                for z in range(wo):
                    r = (s * ho + y) * wo + z
                    q = 0
                    for ch in range(c):
                        for i in range(k):
                            dst = dxp[s, ch, y * stride + i]
                            for j in range(k):
                                dst[z * stride + j] += dcols[r, q]
                                q += 1
        return dxp

    @numba.njit(cache=True)
    def _maxpool_forward_loops(x, p):
        n, c, h, w = x.shape
        ho, wo = h // p, w // p
        out = np.empty((n, c, ho, wo))
        idx = np.empty((n, c, ho, wo), dtype=np.int64)
        for s in range(n):
            for ch in range(c):
                for y in range(ho):
                    for z in range(wo):
                        best = x[s, ch, y * p, z * p]
                        arg = 0
                        for i in range(p):
                            for j in range(p):
                                v = x[s, ch, y * p + i, z * p + j]
                                if v > best:
                                    best = v
                                    arg = i * p + j
                        out[s, ch, y, z] = best
                        idx[s, ch, y, z] = arg
        return out, idx

    @numba.njit(cache=True)
    def _maxpool_backward_loops(dout, idx, n, c, h, w, p):
        dx = np.zeros((n, c, h, w))
        ho, wo = dout.shape[2], dout.shape[3]
        for s in range(n):
            for ch in range(c):
                for y in range(ho):
                    for z in range(wo):
                        a = idx[s, ch, y, z]
                        dx[s, ch, y * p + a // p, z * p + a % p] += dout[s, ch, y, z]
        return dx


def conv_forward_nb(x, w, b, stride, pad):
    n = x.shape[0]
    f, _, k, _ = w.shape
    ho = conv_out_size(x.shape[2], k, stride, pad)
    wo = conv_out_size(x.shape[3], k, stride, pad)
    cols = _im2col(_pad(x, pad), k, stride, ho, wo)
    out = cols @ w.reshape(f, -1).T
    out += b
    return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))


def _dout_matrix(dout):
    n, f, ho, wo = dout.shape
    return np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)


def conv_backward_weight_nb(dout, x, w_shape, stride, pad):
    f, c, k, _ = w_shape
    cols = _im2col(_pad(x, pad), k, stride, dout.shape[2], dout.shape[3])
    g = _dout_matrix(dout)
    return (g.T @ cols).reshape(w_shape), g.sum(axis=0)


def conv_backward_input_nb(dout, w, x_shape, stride, pad):
    n, c, h, wd = x_shape
    f, _, k, _ = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dcols = _dout_matrix(dout) @ w.reshape(f, -1)
    dxp = _col2im(dcols, n, c, h + 2 * pad, wd + 2 * pad, k, stride, ho, wo)
    return np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + wd])


def maxpool_forward_nb(x, p):
    return _maxpool_forward_loops(np.ascontiguousarray(x), p)


def maxpool_backward_nb(dout, idx, x_shape, p):
    n, c, h, w = x_shape
    return _maxpool_backward_loops(np.ascontiguousarray(dout), idx, n, c, h, w, p)


_NAMES = (
    "conv_forward",
    "conv_backward_weight",
    "conv_backward_input",
    "maxpool_forward",
    "maxpool_backward",
)

BACKENDS = {"numpy": {name: globals()[name + "_np"] for name in _NAMES}}
if HAVE_NUMBA:
    BACKENDS["numba"] = {name: globals()[name + "_nb"] for name in _NAMES}


def default_backend() -> str:
    flag = os.environ.get("FASTRETRAIN_DISABLE_NUMBA", "0").strip().lower()
    if not HAVE_NUMBA or flag not in ("", "0", "false", "no"):
        return "numpy"
    return "numba"


backend = default_backend()


def use_backend(name: str) -> None:
    """Route the module-level kernel names to ``name`` (``"numba"`` or ``"numpy"``)."""
    global backend
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; have {sorted(BACKENDS)}")
    backend = name
    globals().update(BACKENDS[name])


use_backend(backend)
