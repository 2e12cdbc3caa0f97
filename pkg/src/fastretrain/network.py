"""A small from-scratch conv + dense network trained with SGD.

The conv trunk is ``conv3x3 -> relu -> maxpool`` blocks; the dense stack uses
:class:`~fastretrain.retrain.DenseLayer` so the retraining step can act on it
directly. Everything is float64.

Conv layers outside a :class:`~fastretrain.scheduler.FreezePlan`'s active set
still run forward but get no gradient and no update. Backpropagation stops
below the lowest active conv layer.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .data import Dataset, batches
from .errors import CheckpointError, DivergenceError
from .retrain import DenseLayer, with_bias
from .scheduler import FreezePlan

ARCHS = ("mlp", "cnn-s")

_INIT_STREAM = 0x494E4954
_DROPOUT_STREAM = 0x44524F50


@dataclass
class ConvLayer:
    kernels: np.ndarray  # (out_ch, in_ch, k, k)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1
    padding: int = 1
    activation: str = "relu"

    def out_shape(self, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        _, h, w = in_shape
        k = self.kernels.shape[2]
        ho = kernels.conv_out_size(h, k, self.stride, self.padding)
        wo = kernels.conv_out_size(w, k, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ValueError(f"conv layer produces empty output from input {in_shape}")
        return self.kernels.shape[0], ho, wo


@dataclass
class Net:
    input_shape: tuple[int, ...]
    conv_layers: list[ConvLayer]
    pools: list[int]  # max-pool window after each conv layer (1 = none)
    dense_layers: list[DenseLayer]
    arch: str = "custom"
    velocity: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.pools) != len(self.conv_layers):
            raise ValueError("need one pool descriptor per conv layer")
        if not self.dense_layers:
            raise ValueError("a net needs at least one dense layer")
        if self.dense_layers[-1].activation != "linear":
            raise ValueError("the last dense layer must be linear")
        width = int(np.prod(self.trunk_shape()))
        for layer in self.dense_layers:
            if layer.d_in != width:
                raise ValueError(f"dense layer expects {layer.d_in} inputs, previous layer gives {width}")
            width = layer.d_out

    @property
    def num_classes(self) -> int:
        return self.dense_layers[-1].d_out

    def trunk_shape(self) -> tuple[int, ...]:
        """Shape of one sample after the conv trunk (before flattening)."""
        return _trunk_shape(self.input_shape, self.conv_layers, self.pools)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for conv in self.conv_layers:
            out += [conv.kernels, conv.bias]
        out += [d.weights for d in self.dense_layers]
        return out

    def descriptor(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "conv": [
                {
                    "out": int(c.kernels.shape[0]),
                    "k": int(c.kernels.shape[2]),
                    "stride": c.stride,
                    "padding": c.padding,
                    "pool": p,
                }
                for c, p in zip(self.conv_layers, self.pools)
            ],
            "dense": [
                {"out": d.d_out, "activation": d.activation, "dropout": d.dropout_rate}
                for d in self.dense_layers
            ],
        }


def _trunk_shape(input_shape, convs, pools) -> tuple[int, ...]:
    shape = tuple(input_shape)
    for conv, p in zip(convs, pools):
        c, h, w = conv.out_shape(shape)
        shape = (c, h // p, w // p)
    return shape


# construction ----------------------------------------------------------------


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


def build_net(
    arch: str,
    input_shape: Sequence[int],
    num_classes: int,
    seed: int,
    hidden: Sequence[int] | None = None,
    dropout_rate: float = 0.0,
) -> Net:
    """Build ``mlp`` (hidden 256, 128) or ``cnn-s`` (conv 8/16/32 + pool, dense 128).

    Weights use fan-in scaled uniform init, ``sqrt(6 / fan_in)`` for layers
    followed by ReLU and ``1 / sqrt(fan_in)`` for the linear head; biases start
    at zero.
    """
    rng = np.random.default_rng([int(seed), _INIT_STREAM])
    input_shape = tuple(int(s) for s in input_shape)
    convs: list[ConvLayer] = []
    pools: list[int] = []
    if arch == "mlp":
        hidden = tuple(hidden) if hidden is not None else (256, 128)
    elif arch == "cnn-s":
        hidden = tuple(hidden) if hidden is not None else (128,)
        if len(input_shape) != 3:
            raise ValueError(f"cnn-s needs (C, H, W) inputs, got {input_shape}")
        in_ch = input_shape[0]
        for out_ch in (8, 16, 32):
            fan_in = in_ch * 9
            convs.append(
                ConvLayer(_uniform(rng, np.sqrt(6.0 / fan_in), (out_ch, in_ch, 3, 3)), np.zeros(out_ch))
            )
            pools.append(2)
            in_ch = out_ch
    else:
        raise ValueError(f"unknown arch {arch!r}; choose from {ARCHS}")

    width = int(np.prod(_trunk_shape(input_shape, convs, pools)))
    dense = []
    for h in hidden:
        w = np.zeros((width + 1, h))
        w[:-1] = _uniform(rng, np.sqrt(6.0 / width), (width, h))
        dense.append(DenseLayer(w, "relu", dropout_rate))
        width = h
    w = np.zeros((width + 1, num_classes))
    w[:-1] = _uniform(rng, 1.0 / np.sqrt(width), (width, num_classes))
    dense.append(DenseLayer(w, "linear", 0.0))
    return Net(input_shape, convs, pools, dense, arch)


# forward / backward ----------------------------------------------------------


def _check_batch(net: Net, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape[1:]) != tuple(net.input_shape):
        raise ValueError(f"batch sample shape {x.shape[1:]} does not match net input {net.input_shape}")
    return x


def trunk_forward(net: Net, x: np.ndarray, cache: list | None = None) -> np.ndarray:
    """Conv trunk output, flattened to ``(N, features)``."""
    a = x
    for conv, p in zip(net.conv_layers, net.pools):
        z = kernels.conv_forward(a, conv.kernels, conv.bias, conv.stride, conv.padding)
        r = np.maximum(z, 0.0)
        if p > 1:
            out, idx = kernels.maxpool_forward(r, p)
        else:
            out, idx = r, None
        if cache is not None:
            cache.append((a, z, idx, r.shape))
        a = out
    return a.reshape(a.shape[0], -1)


def dense_forward(
    layers: Sequence[DenseLayer],
    h: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
    cache: list | None = None,
    capture: list | None = None,
) -> np.ndarray:
    for layer in layers:
        hb = with_bias(h)
        if capture is not None:
            capture.append(hb)
        z = hb @ layer.weights
        if layer.activation == "relu":
            out = np.maximum(z, 0.0)
        else:
            out = z
        keep = None
        if train and layer.dropout_rate > 0.0:
            keep = (rng.random(out.shape) >= layer.dropout_rate) / (1.0 - layer.dropout_rate)
            out = out * keep
        if cache is not None:
            cache.append((hb, z, keep))
        h = out
    return h


def forward(net: Net, batch, mode: str = "eval", capture: bool = False, rng=None):
    """Logits for ``batch``; with ``capture`` also each dense layer's input (bias column included).

    ``mode="train"`` enables dropout and needs ``rng`` when any layer uses it.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = _check_batch(net, batch)
    captured = [] if capture else None
    logits = dense_forward(
        net.dense_layers, trunk_forward(net, x), train=mode == "train", rng=rng, capture=captured
    )
    return logits, captured


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass
class Gradients:
    conv: list  # per conv layer: (d_kernels, d_bias) or None when frozen
    dense: list  # per dense layer: d_weights
    flops: int


def _backward(net: Net, conv_cache, dense_cache, dlogits, active: frozenset[int] | None) -> Gradients:
    """Backpropagate ``dlogits``; ``active=None`` trains every conv layer."""
    n_conv = len(net.conv_layers)
    active = frozenset(range(n_conv)) if active is None else active
    lowest = min(active) if active else n_conv
    flops = 0

    dense_grads: list = [None] * len(net.dense_layers)
    g = dlogits
    for i in range(len(net.dense_layers) - 1, -1, -1):
        layer = net.dense_layers[i]
        hb, z, keep = dense_cache[i]
        if keep is not None:
            g = g * keep
            flops += g.size
        if layer.activation == "relu":
            g = g * (z > 0)
            flops += g.size
        dense_grads[i] = hb.T @ g
        flops += 2 * hb.shape[0] * hb.shape[1] * g.shape[1]
        if i == 0 and lowest >= n_conv:
            g = None
            break
        g = g @ layer.weights[:-1].T
        flops += 2 * g.shape[0] * g.shape[1] * layer.weights.shape[1]

    conv_grads: list = [None] * n_conv
    if g is not None:
        g = g.reshape((g.shape[0],) + net.trunk_shape())
        for i in range(n_conv - 1, lowest - 1, -1):
            conv = net.conv_layers[i]
            a_in, z, idx, r_shape = conv_cache[i]
            p = net.pools[i]
            if p > 1:
                g = kernels.maxpool_backward(g, idx, r_shape, p)
                flops += g.size
            g = g * (z > 0)
            flops += g.size
            per_pass = 2 * z.shape[0] * z.shape[2] * z.shape[3] * conv.kernels.size
            if i in active:
                conv_grads[i] = kernels.conv_backward_weight(g, a_in, conv.kernels.shape, conv.stride, conv.padding)
                flops += per_pass
            if i > lowest:
                g = kernels.conv_backward_input(g, conv.kernels, a_in.shape, conv.stride, conv.padding)
                flops += per_pass
    return Gradients(conv_grads, dense_grads, int(flops))


def loss_and_grads(net: Net, x, labels, active=None, rng=None, train: bool = True):
    """Mean cross-entropy on a mini-batch plus parameter gradients."""
    x = _check_batch(net, x)
    conv_cache: list = []
    dense_cache: list = []
    h = trunk_forward(net, x, conv_cache)
    logits = dense_forward(net.dense_layers, h, train=train, rng=rng, cache=dense_cache)
    loss, dlogits = softmax_cross_entropy(logits, np.asarray(labels))
    return loss, _backward(net, conv_cache, dense_cache, dlogits, active), logits


# SGD -------------------------------------------------------------------------


@dataclass
class SgdConfig:
    lr: tuple[tuple[int, float], ...] = ((0, 0.1),)  # (start epoch, learning rate)
    momentum: float = 0.0
    mini_batch: int = 32
    seed: int = 0

    def __post_init__(self):
        self.lr = tuple((int(e), float(v)) for e, v in self.lr)
        if not self.lr or self.lr[0][0] != 0:
            raise ValueError("learning-rate schedule must start at epoch 0")
        if any(v <= 0 for _, v in self.lr):
            raise ValueError("learning rates must be > 0")
        if any(b[0] <= a[0] for a, b in zip(self.lr, self.lr[1:])):
            raise ValueError("learning-rate milestones must be strictly increasing")
        if self.momentum < 0:
            raise ValueError("momentum must be >= 0")
        if self.mini_batch < 1:
            raise ValueError("mini_batch must be >= 1")

    def lr_at(self, epoch: int) -> float:
        rate = self.lr[0][1]
        for start, v in self.lr:
            if start <= epoch:
                rate = v
        return rate


@dataclass
class EpochStats:
    loss: float
    train_acc: float
    wall_ms: float
    backward_flops: int
    steps: int
    lr: float


def _apply(net: Net, key, param: np.ndarray, grad: np.ndarray, lr: float, momentum: float) -> None:
    if momentum > 0.0:
        v = net.velocity.get(key)
        v = grad.copy() if v is None else momentum * v + grad
        net.velocity[key] = v
        grad = v
    param -= lr * grad


def sgd_epoch(net: Net, data: Dataset, cfg: SgdConfig, plan: FreezePlan, epoch: int = 0) -> tuple[Net, EpochStats]:
    """One SGD pass over ``data`` training only the conv layers named by ``plan``.

    Dense layers are always trained. The net is updated in place and returned.
    """
    n_conv = len(net.conv_layers)
    if plan.l_a + plan.l_i != n_conv:
        raise ValueError(f"plan covers {plan.l_a + plan.l_i} conv layers, net has {n_conv}")
    if any(not 0 <= i < n_conv for i in plan.active_layers):
        raise ValueError("plan names conv layers the net does not have")
    lr = cfg.lr_at(epoch)
    rng = np.random.default_rng([cfg.seed, epoch, _DROPOUT_STREAM])
    started = time.perf_counter()
    total_loss = 0.0
    correct = 0
    seen = 0
    flops = 0
    steps = 0
    for b, (xb, yb) in enumerate(batches(data, cfg.mini_batch, cfg.seed, epoch)):
        loss, grads, logits = loss_and_grads(net, xb, yb, plan.active_layers, rng)
        if not np.isfinite(loss):
            raise DivergenceError(epoch, b, loss)
        for i, g in enumerate(grads.conv):
            if g is None:
                continue
            conv = net.conv_layers[i]
            _apply(net, ("ck", i), conv.kernels, g[0], lr, cfg.momentum)
            _apply(net, ("cb", i), conv.bias, g[1], lr, cfg.momentum)
        for i, g in enumerate(grads.dense):
            _apply(net, ("d", i), net.dense_layers[i].weights, g, lr, cfg.momentum)
        if not all(np.isfinite(d.weights).all() for d in net.dense_layers):
            raise DivergenceError(epoch, b, float("nan"))
        total_loss += loss * len(yb)
        correct += int((logits.argmax(axis=1) == yb).sum())
        seen += len(yb)
        flops += grads.flops
        steps += 1
    stats = EpochStats(
        loss=total_loss / seen,
        train_acc=correct / seen,
        wall_ms=(time.perf_counter() - started) * 1e3,
        backward_flops=flops,
        steps=steps,
        lr=lr,
    )
    return net, stats


def predict(net: Net, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    out = []
    for lo in range(0, x.shape[0], batch_size):
        logits, _ = forward(net, x[lo : lo + batch_size])
        out.append(logits)
    return np.concatenate(out, axis=0)


def accuracy(net: Net, ds: Dataset, batch_size: int = 1024) -> float:
    return float((predict(net, ds.features, batch_size).argmax(axis=1) == ds.labels).mean())


def output_residual_norm(net: Net, ds: Dataset, batch_size: int = 1024) -> float:
    """``||one_hot - logits||_F`` over ``ds`` in eval mode."""
    logits = predict(net, ds.features, batch_size)
    return float(np.linalg.norm(ds.one_hot() - logits))


class NetFeatureSource:
    """Captures the trunk output once, then replays dense-layer inputs chunk by chunk.

    Dense inputs are recomputed from a snapshot of the dense weights taken at
    capture time, so the replay is identical however the live net changes.
    """

    def __init__(self, net: Net, ds: Dataset, chunk: int = 1024):
        self.snapshot = [d.copy() for d in net.dense_layers]
        if net.conv_layers:
            parts = [trunk_forward(net, ds.features[lo : lo + chunk]) for lo in range(0, len(ds), chunk)]
            self.trunk = np.concatenate(parts, axis=0)
        else:
            self.trunk = np.asarray(ds.features, dtype=np.float64).reshape(len(ds), -1)

    def stream(self, batch_size: int):
        for lo in range(0, self.trunk.shape[0], batch_size):
            captured: list = []
            dense_forward(self.snapshot, self.trunk[lo : lo + batch_size], capture=captured)
            yield captured


# checkpoints -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"FRCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(net: Net, path) -> None:
    """Binary checkpoint.

    Layout (little-endian): 4-byte magic ``FRCK``, uint32 version, uint32 length
    plus UTF-8 JSON architecture descriptor, uint32 tensor count, then per tensor
    uint32 ndim, ndim x uint32 dims, float32 data.
    """
    desc = json.dumps(net.descriptor(), sort_keys=True).encode()
    params = net.parameters()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(desc)))
        f.write(desc)
        f.write(struct.pack("<I", len(params)))
        for p in params:
            f.write(struct.pack("<I", p.ndim))
            f.write(struct.pack(f"<{p.ndim}I", *p.shape))
            f.write(p.astype("<f4").tobytes())


def load_checkpoint(path) -> Net:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack_from("<I", raw, 8)
        desc = json.loads(raw[12 : 12 + n].decode())
        off = 12 + n
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 4 * size > len(raw):
                raise CheckpointError(f"{path}: truncated tensor data")
            tensors.append(np.frombuffer(raw, "<f4", size, off).reshape(shape).astype(np.float64))
            off += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")

    convs, pools, dense = [], [], []
    it = iter(tensors)
    for c in desc["conv"]:
        convs.append(ConvLayer(next(it), next(it), c["stride"], c["padding"]))
        pools.append(c["pool"])
    for d in desc["dense"]:
        dense.append(DenseLayer(next(it), d["activation"], d["dropout"]))
    return Net(tuple(desc["input_shape"]), convs, pools, dense, desc["arch"])
