"""Ridge and recursive (Sherman-Morrison-Woodbury) least-squares solvers.

Matrices are plain 2-D ``numpy`` arrays with samples as rows and features as
columns. Every public function validates its operands, materializes float64
working copies and checks its outputs for non-finite values.

The regularizer is written ``I / C``: a larger ``reg_c`` means weaker
regularization.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import lapack

from .errors import (
    DimensionError,
    NonFiniteError,
    RegularizationError,
    SingularMatrixError,
)

# relative Frobenius tolerance for incremental vs one-shot agreement (float64, d <= 1024)
ORACLE_RTOL = 1e-8
# reciprocal-condition threshold on the b x b inner system of an update
COND_LIMIT = 1e12

_STATE_HEADER = struct.Struct("<3q")


class MemoryMeter:
    """Counts live and peak bytes of matrices allocated inside the solver.

    The count is bookkeeping, not an OS measurement, so it is deterministic and
    platform-independent. Solver functions call :meth:`take` when they create a
    working matrix and :meth:`give` when they drop it.
    """

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def take(self, *arrays: np.ndarray) -> None:
        for a in arrays:
            self.live += a.nbytes
        self.peak = max(self.peak, self.live)

    def give(self, *arrays: np.ndarray) -> None:
        for a in arrays:
            self.live -= a.nbytes

    def reset(self) -> None:
        self.live = 0
        self.peak = 0


_NULL_METER = MemoryMeter()


def as_mat(x: ArrayLike, name: str = "matrix") -> NDArray[np.float64]:
    """Return ``x`` as a finite, C-contiguous float64 matrix (always a copy)."""
    a = np.array(x, dtype=np.float64, order="C", copy=True)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return a


def _check_reg(reg_c: float) -> float:
    reg_c = float(reg_c)
    if not np.isfinite(reg_c) or reg_c <= 0:
        raise RegularizationError(f"reg_c must be a positive finite number, got {reg_c!r}")
    return reg_c


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{what} produced non-finite values")
    return a


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return (a + a.T) * 0.5


def _add_to_diag(a: np.ndarray, v: float) -> None:
    a.flat[:: a.shape[0] + 1] += v


def direct_inverse(m: ArrayLike) -> NDArray[np.float64]:
    """Invert a square matrix through an LU factorization with partial pivoting."""
    a = as_mat(m, "m")
    n, k = a.shape
    if n != k:
        raise DimensionError(f"direct_inverse needs a square matrix, got {a.shape}")
    if n == 0:
        return a
    anorm = np.abs(a).sum(axis=0).max()
    with warnings.catch_warnings():
        # exact singularity is reported below as SingularMatrixError
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    if anorm == 0.0 or np.any(np.diag(lu) == 0.0):
        raise SingularMatrixError("matrix is singular")
    rcond, info = lapack.dgecon(lu, anorm, norm="1")
    if info != 0 or rcond < np.finfo(np.float64).eps:
        raise SingularMatrixError(f"matrix is singular to working precision (rcond={rcond:.3e})")
    inv = scipy.linalg.lu_solve((lu, piv), np.eye(n), check_finite=False)
    return _check_finite(inv, "direct_inverse")


def _conformable(h: np.ndarray, e: np.ndarray) -> None:
    if h.shape[0] != e.shape[0]:
        raise DimensionError(f"row mismatch: features have {h.shape[0]} rows, residuals {e.shape[0]}")
    if h.shape[0] < 1:
        raise DimensionError("at least one sample row is required")


def ridge_solve(
    h: ArrayLike, e: ArrayLike, reg_c: float, meter: MemoryMeter | None = None
) -> NDArray[np.float64]:
    """One-shot regularized least squares, ``(H^T H + I/C)^{-1} H^T e``.

    Args:
        h: features, ``N x d``.
        e: residual targets, ``N x c``.
        reg_c: the regularization term ``C`` (> 0).
        meter: optional allocation counter.

    Returns:
        ``d x c`` correction minimizing ``||e - H eta||^2 + ||eta||^2 / C``.
    """
    meter = meter or _NULL_METER
    reg_c = _check_reg(reg_c)
    H = as_mat(h, "h")
    E = as_mat(e, "e")
    meter.take(H, E)
    _conformable(H, E)

    gram = H.T @ H
    rhs = H.T @ E
    meter.take(gram, rhs)
    meter.give(H, E)
    del H, E
    _add_to_diag(gram, 1.0 / reg_c)
    try:
        factor = scipy.linalg.cho_factor(gram, lower=False, overwrite_a=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("regularized Gram matrix is not positive definite") from exc
    eta = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    meter.take(eta)
    meter.give(gram, rhs, eta)
    return _check_finite(eta, "ridge_solve")


@dataclass(frozen=True)
class RlsState:
    """Accumulated inverse Gram matrix and solution of the batch recursion."""

    r_inv: NDArray[np.float64]
    eta: NDArray[np.float64]
    reg_c: float
    batches_seen: int = field(default=1)

    @property
    def d(self) -> int:
        return self.r_inv.shape[0]

    @property
    def c(self) -> int:
        return self.eta.shape[1]

    def to_bytes(self) -> bytes:
        """Debug dump: ``d, c, batches_seen`` as int64 LE, then r_inv and eta as float64 LE."""
        head = _STATE_HEADER.pack(self.d, self.c, self.batches_seen)
        return head + self.r_inv.astype("<f8").tobytes() + self.eta.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, reg_c: float) -> RlsState:
        if len(blob) < _STATE_HEADER.size:
            raise DimensionError("state blob shorter than its header")
        d, c, seen = _STATE_HEADER.unpack_from(blob)
        need = _STATE_HEADER.size + 8 * (d * d + d * c)
        if len(blob) != need or d < 0 or c < 0 or seen < 1:
            raise DimensionError(f"state blob has {len(blob)} bytes, header implies {need}")
        body = np.frombuffer(blob, dtype="<f8", offset=_STATE_HEADER.size)
        r_inv = body[: d * d].reshape(d, d).astype(np.float64)
        eta = body[d * d :].reshape(d, c).astype(np.float64)
        return cls(r_inv=r_inv, eta=eta, reg_c=_check_reg(reg_c), batches_seen=int(seen))


def rls_init(h1: ArrayLike, e1: ArrayLike, reg_c: float, meter: MemoryMeter | None = None) -> RlsState:
    """Start the recursion from the first batch with a direct inverse."""
    meter = meter or _NULL_METER
    reg_c = _check_reg(reg_c)
    H = as_mat(h1, "h1")
    E = as_mat(e1, "e1")
    meter.take(H, E)
    _conformable(H, E)

    gram = H.T @ H
    _add_to_diag(gram, 1.0 / reg_c)
    meter.take(gram)
    r_inv = _symmetrize(direct_inverse(gram))
    meter.take(r_inv)
    meter.give(gram)
    hte = H.T @ E
    meter.take(hte)
    eta = r_inv @ hte
    meter.take(eta)
    meter.give(H, E, hte)
    _check_finite(eta, "rls_init")
    # the state's own matrices stay live until the caller drops the state
    meter.give(r_inv, eta)
    return RlsState(r_inv=r_inv, eta=eta, reg_c=reg_c, batches_seen=1)


def rls_update(
    state: RlsState, hp: ArrayLike, ep: ArrayLike, meter: MemoryMeter | None = None
) -> RlsState:
    """Fold one more batch into the recursion.

    With ``S = I + Hp R^{-1} Hp^T`` (a ``b x b`` system, Cholesky-factored)::

        K     = I - R^{-1} Hp^T S^{-1} Hp
        R'^-1 = K R^{-1}
        eta'  = K eta + R'^-1 Hp^T ep

    ``K`` is applied in factored form and never materialized as ``d x d``.
    """
    meter = meter or _NULL_METER
    H = as_mat(hp, "hp")
    E = as_mat(ep, "ep")
    meter.take(H, E)
    _conformable(H, E)
    if H.shape[1] != state.d:
        raise DimensionError(f"batch has {H.shape[1]} feature columns, state expects {state.d}")
    if E.shape[1] != state.c:
        raise DimensionError(f"batch has {E.shape[1]} residual columns, state expects {state.c}")

    # the state's matrices are live for the whole update
    meter.take(state.r_inv, state.eta)
    r_inv, eta = state.r_inv, state.eta

    U = r_inv @ H.T  # d x b
    S = H @ U
    meter.take(U, S)
    _add_to_diag(S, 1.0)
    S = _symmetrize(S)
    anorm = np.abs(S).sum(axis=0).max()
    try:
        factor = scipy.linalg.cho_factor(S, lower=False, overwrite_a=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(
            "inner batch system is not positive definite; use a smaller batch or larger 1/C"
        ) from exc
    rcond, info = lapack.dpocon(factor[0], anorm, uplo="U")
    if info != 0 or rcond * COND_LIMIT < 1.0:
        raise SingularMatrixError(
            f"inner batch system is ill-conditioned (cond ~ {1.0 / max(rcond, 1e-300):.3e}); "
            "use a smaller batch or larger 1/C"
        )

    X = scipy.linalg.cho_solve(factor, U.T, check_finite=False)  # b x d
    meter.take(X)
    r_new = r_inv - U @ X
    meter.take(r_new)
    meter.give(X)
    del X
    r_new = _symmetrize(r_new)

    k_eta = eta - U @ scipy.linalg.cho_solve(factor, H @ eta, check_finite=False)
    hte = H.T @ E
    meter.take(k_eta, hte)
    eta_new = k_eta + r_new @ hte
    meter.take(eta_new)
    meter.give(U, S, k_eta, hte, H, E, state.r_inv, state.eta, r_new, eta_new)

    _check_finite(r_new, "rls_update")
    _check_finite(eta_new, "rls_update")
    return RlsState(r_inv=r_new, eta=eta_new, reg_c=state.reg_c, batches_seen=state.batches_seen + 1)


def rls_solve(batches, reg_c: float, meter: MemoryMeter | None = None) -> RlsState:
    """Run the recursion over an iterable of ``(features, residuals)`` batches."""
    state = None
    for h, e in batches:
        state = rls_init(h, e, reg_c, meter) if state is None else rls_update(state, h, e, meter)
    if state is None:
        raise DimensionError("empty batch stream")
    return state


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b||_F / max(||b||_F, tiny)``."""
    denom = max(np.linalg.norm(b), np.finfo(np.float64).tiny)
    return float(np.linalg.norm(a - b) / denom)
