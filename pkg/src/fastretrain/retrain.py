"""Dense-layer refinement with the batch-by-batch pseudoinverse solver.

Conventions: samples are rows, a dense layer maps ``[H, 1] @ W`` with ``W`` of
shape ``(d_in + 1, d_out)`` (the last row is the bias), and the output residual
is ``one_hot_targets - logits``.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from itertools import zip_longest
from typing import Callable, Iterable, Iterator, Protocol, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import DimensionError, NonFiniteError
from .linalg import MemoryMeter, as_mat, direct_inverse, rls_init, rls_update, _check_reg

ACTIVATIONS = ("linear", "relu")
PULLBACK_MODES = ("after", "before")


@dataclass
class DenseLayer:
    weights: NDArray[np.float64]
    activation: str = "relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] < 1:
            raise DimensionError(f"dense weights must be (d_in + 1, d_out), got {self.weights.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def d_in(self) -> int:
        return self.weights.shape[0] - 1

    @property
    def d_out(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> DenseLayer:
        return DenseLayer(self.weights.copy(), self.activation, self.dropout_rate)


def with_bias(h: np.ndarray) -> np.ndarray:
    """Append the constant-one feature column."""
    return np.concatenate([h, np.ones((h.shape[0], 1), dtype=h.dtype)], axis=1)


@dataclass
class LayerStats:
    residual_before: float
    residual_after: float
    batches: int
    eta_norm: float


@dataclass
class RetrainReport:
    # ordered like the dense stack (index 0 = first dense layer)
    layers: list[LayerStats] = field(default_factory=list)
    duration_ms: float = 0.0
    peak_bytes: int = 0

    def to_dict(self) -> dict:
        return {
            "layers": [asdict(s) for s in self.layers],
            "duration_ms": self.duration_ms,
            "peak_bytes": self.peak_bytes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def output_residual(logits, targets) -> NDArray[np.float64]:
    """``targets - logits`` for one-hot ``targets``."""
    y = as_mat(logits, "logits")
    t = as_mat(targets, "targets")
    if y.shape != t.shape:
        raise DimensionError(f"logits {y.shape} and targets {t.shape} differ in shape")
    if not (np.isin(t, (0.0, 1.0)).all() and (t.sum(axis=1) == 1.0).all()):
        raise ValueError("targets rows must be one-hot")
    return t - y


def pseudo_inverse(a, reg_c: float) -> NDArray[np.float64]:
    """Ridge pseudoinverse ``(a^T a + I/C)^{-1} a^T`` of shape ``(a.cols, a.rows)``."""
    a = as_mat(a, "a")
    reg_c = _check_reg(reg_c)
    g = a.T @ a
    g.flat[:: g.shape[0] + 1] += 1.0 / reg_c
    return direct_inverse(g) @ a.T


def pull_back_residual(e_next, a_next, reg_c: float, pinv: np.ndarray | None = None) -> NDArray[np.float64]:
    """Map a layer's residual onto the post-activation output of the layer below.

    ``max(0, e_next @ P)`` with ``P`` the ridge pseudoinverse of ``a_next``; the
    bias coordinate is dropped since a constant input has no upstream residual.
    ``pinv`` may carry a precomputed ``P`` when the same weights are reused for
    many chunks.
    """
    e = as_mat(e_next, "e_next")
    if pinv is None:
        a = as_mat(a_next, "a_next")
        if a.shape[1] != e.shape[1]:
            raise DimensionError(f"residual has {e.shape[1]} columns, weights map to {a.shape[1]}")
        pinv = pseudo_inverse(a, reg_c)
    elif pinv.shape[0] != e.shape[1]:
        raise DimensionError(f"residual has {e.shape[1]} columns, pseudoinverse expects {pinv.shape[0]}")
    return np.maximum(e @ pinv[:, :-1], 0.0)


class Replayable:
    """Re-iterable wrapper around a zero-argument iterator factory."""

    def __init__(self, factory: Callable[[], Iterator]):
        self._factory = factory

    def __iter__(self):
        return iter(self._factory())


def _require_replayable(x, name: str):
    if iter(x) is x:
        raise TypeError(f"{name} must be re-iterable (list or Replayable), not a one-shot iterator")


def _pairs(features: Iterable, residuals: Iterable):
    for k, (h, e) in enumerate(zip_longest(features, residuals)):
        if h is None or e is None:
            raise DimensionError(f"feature and residual streams have different lengths (at batch {k})")
        if h.shape[0] != e.shape[0]:
            raise DimensionError(f"batch {k}: {h.shape[0]} feature rows vs {e.shape[0]} residual rows")
        yield h, e


def dropout_row_mask(n_rows: int, rate: float, rng: np.random.Generator) -> np.ndarray | None:
    """Boolean mask of rows of the correction to zero out, or ``None`` when ``rate == 0``."""
    if rate <= 0.0:
        return None
    return rng.random(n_rows) < rate


def retrain_layer(
    layer: DenseLayer,
    features: Iterable[np.ndarray],
    residuals: Iterable[np.ndarray],
    reg_c: float,
    mu: float = 1.0,
    dropout_mask: np.ndarray | None = None,
    meter: MemoryMeter | None = None,
) -> tuple[DenseLayer, LayerStats]:
    """Fit a weight correction to streamed ``(features, residuals)`` and apply it.

    The first batch seeds the recursion, later batches are folded in with
    :func:`~fastretrain.linalg.rls_update`. The new weights are
    ``weights + mu * F(eta)`` where ``F`` zeroes the rows named by
    ``dropout_mask``. Both streams are traversed twice (solve, then the
    post-update residual), so they must be re-iterable.
    """
    if not 0.0 < mu <= 1.0:
        raise ValueError(f"mu must be in (0, 1], got {mu}")
    _require_replayable(features, "features")
    _require_replayable(residuals, "residuals")

    state = None
    before_sq = 0.0
    for h, e in _pairs(features, residuals):
        if h.shape[1] != layer.weights.shape[0] or e.shape[1] != layer.d_out:
            raise DimensionError(
                f"batch shapes {h.shape} / {e.shape} do not fit layer weights {layer.weights.shape}"
            )
        before_sq += float(np.sum(np.square(e, dtype=np.float64)))
        state = rls_init(h, e, reg_c, meter) if state is None else rls_update(state, h, e, meter)
    if state is None:
        raise DimensionError("empty batch stream")

    eta = state.eta
    if dropout_mask is not None:
        mask = np.asarray(dropout_mask, dtype=bool)
        if mask.shape != (eta.shape[0],):
            raise DimensionError(f"dropout mask must have {eta.shape[0]} entries, got {mask.shape}")
        eta = eta.copy()
        eta[mask] = 0.0
    step = mu * eta

    after_sq = 0.0
    for h, e in _pairs(features, residuals):
        r = np.asarray(e, dtype=np.float64) - np.asarray(h, dtype=np.float64) @ step
        after_sq += float(np.sum(np.square(r)))

    new_w = layer.weights + step
    if not np.isfinite(new_w).all():
        raise NonFiniteError("retrained weights are not finite")
    stats = LayerStats(
        residual_before=float(np.sqrt(before_sq)),
        residual_after=float(np.sqrt(after_sq)),
        batches=state.batches_seen,
        eta_norm=float(np.linalg.norm(state.eta)),
    )
    return DenseLayer(new_w, layer.activation, layer.dropout_rate), stats


class FeatureSource(Protocol):
    """Replays the captured inputs of every dense layer, chunk by chunk.

    ``stream(batch_size)`` yields, per chunk of consecutive samples, a list with
    one ``(rows, d_in + 1)`` matrix per dense layer (bias column included).
    Chunks appear in sample order and the replay is identical every time.
    """

    def stream(self, batch_size: int) -> Iterator[list[np.ndarray]]: ...


class ArrayFeatureSource:
    """In-memory :class:`FeatureSource` over per-layer feature matrices."""

    def __init__(self, per_layer: Sequence[np.ndarray]):
        self.per_layer = [np.asarray(h, dtype=np.float64) for h in per_layer]
        rows = {h.shape[0] for h in self.per_layer}
        if len(rows) != 1:
            raise DimensionError(f"per-layer features disagree on sample count: {sorted(rows)}")

    def stream(self, batch_size: int):
        n = self.per_layer[0].shape[0]
        for lo in range(0, n, batch_size):
            yield [h[lo : lo + batch_size] for h in self.per_layer]


@dataclass
class RetrainSettings:
    reg_c: Sequence[float]
    mu: float = 1.0
    mp_batch_size: int = 1024
    seed: int = 0
    # which output residual feeds the pullback chain: "after" the output layer's
    # own update (what it could not absorb) or "before" it (the raw residual)
    pullback: str = "after"

    def c_for(self, i: int, n_layers: int) -> float:
        cs = list(self.reg_c)
        if len(cs) == 1:
            return float(cs[0])
        if len(cs) != n_layers:
            raise ValueError(f"need 1 or {n_layers} reg_c values, got {len(cs)}")
        return float(cs[i])


def retrain_dense_stack(
    layers: Sequence[DenseLayer],
    feature_source: FeatureSource,
    targets,
    settings: RetrainSettings,
) -> tuple[list[DenseLayer], RetrainReport]:
    """Refine every dense layer, last to first.

    The output layer is fitted to the residual of its pre-update weights. Each
    earlier layer's residual is the residual of the layer above pulled back
    through that layer's already-updated weights; with ``pullback="after"`` the
    chain starts from the output residual left after the output layer's update,
    so hidden layers do not re-apply a correction the output layer already made.
    Captured features are reused for the whole pass.
    """
    if not layers:
        raise ValueError("need at least one dense layer")
    if layers[-1].activation != "linear":
        raise ValueError("the output dense layer must be linear")
    if settings.mp_batch_size < 1:
        raise ValueError("mp_batch_size must be >= 1")
    if settings.pullback not in PULLBACK_MODES:
        raise ValueError(f"pullback must be one of {PULLBACK_MODES}, got {settings.pullback!r}")
    t_all = as_mat(targets, "targets")
    n = len(layers)
    bs = settings.mp_batch_size
    started = time.perf_counter()
    meter = MemoryMeter()

    old_out = layers[-1].weights.copy()
    new_layers: list[DenseLayer] = [layer for layer in layers]
    # pinvs[j] is the ridge pseudoinverse of the updated weights of layer j
    pinvs: dict[int, np.ndarray] = {}
    stats: list[LayerStats | None] = [None] * n

    def residual_chunks(i: int):
        def gen():
            lo = 0
            for chunk in feature_source.stream(bs):
                if len(chunk) != n:
                    raise DimensionError(f"feature source yields {len(chunk)} layers, stack has {n}")
                h_out = chunk[-1]
                t = t_all[lo : lo + h_out.shape[0]]
                if t.shape[0] != h_out.shape[0]:
                    raise DimensionError("feature stream is longer than targets")
                lo += h_out.shape[0]
                w_out = new_layers[-1].weights if i < n - 1 and settings.pullback == "after" else old_out
                e = output_residual(h_out @ w_out, t)
                for j in range(n - 1, i, -1):
                    e = pull_back_residual(e, None, 1.0, pinv=pinvs[j])
                yield e
            if lo != t_all.shape[0]:
                raise DimensionError(f"feature stream covered {lo} rows, targets have {t_all.shape[0]}")

        return Replayable(gen)

    def feature_chunks(i: int):
        return Replayable(lambda: (chunk[i] for chunk in feature_source.stream(bs)))

    for i in range(n - 1, -1, -1):
        layer = layers[i]
        c_i = settings.c_for(i, n)
        mask = None
        if i < n - 1:
            rng = np.random.default_rng([settings.seed, i, 0x44524F50])
            mask = dropout_row_mask(layer.weights.shape[0], layer.dropout_rate, rng)
        updated, st = retrain_layer(
            layer, feature_chunks(i), residual_chunks(i), c_i, settings.mu, mask, meter
        )
        new_layers[i] = updated
        stats[i] = st
        if i > 0:
            pinvs[i] = pseudo_inverse(updated.weights, c_i)

    report = RetrainReport(
        layers=list(stats),
        duration_ms=(time.perf_counter() - started) * 1e3,
        peak_bytes=meter.peak,
    )
    return new_layers, report
