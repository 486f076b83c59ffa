"""Range estimation from periodic broadcast timestamps.

Per sliding window of ``w`` periods the estimator differences the timestamps
so the clock offset cancels, models the distance as a quadratic in local time,
keeps the clock drift as a nuisance unknown and solves the resulting
correlated-noise least-squares problem after whitening. Bisquare reweighting
of the whitened residuals suppresses positive non-line-of-sight outliers.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .chrono import SPEED_OF_LIGHT, TICKS_PER_SECOND
from .sim import ExchangeRecord

MAX_CONDITION = 1e12


class WindowGapError(ValueError):
    pass


class DegenerateWindowError(ArithmeticError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    w: int = 8
    robust_iters: int = 5
    c: float = SPEED_OF_LIGHT
    recenter: bool = True
    whiten: bool = True  # False: identity covariance (plain least squares)

    def __post_init__(self):
        if self.w < 2:
            raise ValueError("window size w must be at least 2")
        if self.robust_iters < 0:
            raise ValueError("robust_iters must be >= 0")


@dataclass(frozen=True)
class DeltaWindow:
    """Exact tick differences over periods ``n-w+1 .. n``.

    ``t_D`` and ``t_A`` hold the raw local times of periods ``n-w .. n``.
    """

    n: int
    dt_D: np.ndarray
    ds_A: np.ndarray
    dt_A: np.ndarray
    ds_D: np.ndarray
    t_D: np.ndarray
    t_A: np.ndarray

    @property
    def w(self) -> int:
        return len(self.dt_D)


@dataclass(frozen=True)
class FitDiagnostics:
    residuals: np.ndarray
    median_abs_residual: float
    weights: np.ndarray
    condition_estimate: float


@dataclass(frozen=True)
class RangeEstimate:
    n: int
    t_A_n: int
    d_hat: float
    delta_hat: float
    a0: float
    a1: float
    a2: float
    origin: int  # tick subtracted from local times before the polynomial basis
    diagnostics: FitDiagnostics


def build_window(records: Sequence[ExchangeRecord]) -> DeltaWindow:
    """Difference the last ``w+1`` consecutive records.

    The newest record's ``s_D`` is never read: it is not yet known at the
    local vehicle when that record's arrival happens.
    """
    if len(records) < 3:
        raise WindowGapError("window gap: need at least 3 records (w >= 2)")
    ns = [r.n for r in records]
    if any(b != a + 1 for a, b in zip(ns, ns[1:])):
        raise WindowGapError(f"window gap: records {ns[0]}..{ns[-1]} are not consecutive")
    if any(r.s_D is None for r in records[:-1]):
        raise WindowGapError("window gap: missing remote departure time")
    t_D = np.array([r.t_D for r in records], dtype=np.int64)
    t_A = np.array([r.t_A for r in records], dtype=np.int64)
    s_A = np.array([r.s_A for r in records], dtype=np.int64)
    s_D = np.array([r.s_D for r in records[:-1]], dtype=np.int64)
    dt_D = np.diff(t_D)
    if np.any(dt_D <= 0):
        raise WindowGapError("window gap: departure times not increasing")
    return DeltaWindow(
        n=ns[-1],
        dt_D=dt_D,
        ds_A=np.diff(s_A),
        dt_A=t_D[1:] - t_A[:-1],
        ds_D=s_A[1:] - s_D,
        t_D=t_D,
        t_A=t_A,
    )


def window_origin(win: DeltaWindow, cfg: EstimatorConfig) -> int:
    return int(win.t_D[1]) if cfg.recenter else 0


def design_system(win: DeltaWindow, cfg: EstimatorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Observation vector (meters) and design matrix for ``(delta, a0, a1, a2)``."""
    c = cfg.c
    w = win.w
    origin = window_origin(win, cfg)
    beta = c * np.concatenate([win.ds_A - win.dt_D, win.ds_D - win.dt_A]) / TICKS_PER_SECOND
    x1 = (win.t_D[1:] - origin) / TICKS_PER_SECOND
    x0 = (win.t_D[:-1] - origin) / TICKS_PER_SECOND
    y0 = (win.t_A[:-1] - origin) / TICKS_PER_SECOND
    B = np.empty((2 * w, 4))
    B[:w, 0] = c * win.dt_D / TICKS_PER_SECOND
    B[w:, 0] = c * win.dt_A / TICKS_PER_SECOND
    B[:w, 1] = 0.0
    B[w:, 1] = 2.0
    B[:w, 2] = x1 - x0
    B[w:, 2] = x1 + y0
    B[:w, 3] = (x1 - x0) * (x1 + x0)
    B[w:, 3] = x1 * x1 + y0 * y0
    return beta, B


@lru_cache(maxsize=None)
def _difference_operator(w: int) -> np.ndarray:
    # rows: (dz_A(i); dz_D(i)), columns: (z_A(n-w..n); z_D(n-w..n))
    J = np.zeros((2 * w, 2 * (w + 1)))
    for i in range(w):
        J[i, i] = -1.0
        J[i, i + 1] = 1.0
        J[w + i, i + 1] = 1.0
        J[w + i, w + 1 + i] = -1.0
    return J


@lru_cache(maxsize=None)
def _whitening_cov(w: int) -> np.ndarray:
    J = _difference_operator(w)
    cov = J @ J.T
    cov.setflags(write=False)
    return cov


def whitening_cov(w: int) -> np.ndarray:
    """Noise covariance of the differenced observations, in units of sigma^2."""
    if w < 1:
        raise ValueError("w must be >= 1")
    return _whitening_cov(w).copy()


@lru_cache(maxsize=None)
def _inverse_sqrt(w: int) -> np.ndarray:
    vals, vecs = np.linalg.eigh(_whitening_cov(w))
    W = (vecs / np.sqrt(vals)) @ vecs.T
    W.setflags(write=False)
    return W


def inverse_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root of a positive definite matrix."""
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] <= 0:
        raise DegenerateWindowError("covariance is not positive definite")
    return (vecs / np.sqrt(vals)) @ vecs.T


def _solve(A: np.ndarray, b: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, float]:
    if np.count_nonzero(weights > 0) < A.shape[1]:
        raise DegenerateWindowError("degenerate window: fewer positive weights than unknowns")
    sw = np.sqrt(weights)
    Aw = A * sw[:, None]
    bw = b * sw
    scale = np.linalg.norm(Aw, axis=0)
    if np.any(scale == 0) or not np.all(np.isfinite(scale)):
        raise DegenerateWindowError("degenerate window: empty design column")
    Q, R = np.linalg.qr(Aw / scale)
    cond = np.linalg.cond(R)
    if not cond <= MAX_CONDITION:
        raise DegenerateWindowError(f"degenerate window: condition estimate {cond:.3g}")
    y = np.linalg.solve(R, Q.T @ bw)
    return y / scale, float(cond)


def gls_solve(
    beta: np.ndarray,
    B: np.ndarray,
    cov: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Weighted whitened least squares via QR of the column-equilibrated system.

    Minimizes ``|| diag(weights)^(1/2) cov^(-1/2) (beta - B x) ||^2``.
    """
    W = inverse_sqrt(np.asarray(cov, dtype=float))
    weights = np.ones(len(beta)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(weights < 0) or np.any(weights > 1):
        raise ValueError("weights must lie in [0, 1]")
    x, _ = _solve(W @ B, W @ beta, weights)
    return x


def lower_median(values: np.ndarray) -> float:
    s = np.sort(values)
    return float(s[(len(s) - 1) // 2])


def bisquare_weights(e: np.ndarray, m: float) -> np.ndarray:
    """``max(1 - e^2 / (36 m^2), 0)^2``."""
    u = np.maximum(1.0 - (e * e) / (36.0 * m * m), 0.0)
    return u * u


def robust_fit(win: DeltaWindow, cfg: EstimatorConfig = EstimatorConfig()) -> RangeEstimate:
    """Whitened fit followed by ``cfg.robust_iters`` bisquare refits."""
    beta, B = design_system(win, cfg)
    W = _inverse_sqrt(win.w) if cfg.whiten else np.eye(2 * win.w)
    A = W @ B
    b = W @ beta
    weights = np.ones(len(b))
    x, cond = _solve(A, b, weights)
    e = b - A @ x
    m = lower_median(np.abs(e))
    # with 2w == 4 the system is square and residuals are pure roundoff
    tiny = 1e-12 * max(1.0, float(np.linalg.norm(b)))
    if A.shape[0] > A.shape[1]:
        for _ in range(cfg.robust_iters):
            if m <= tiny:
                break
            weights = bisquare_weights(e, m)
            x, cond = _solve(A, b, weights)
            e = b - A @ x
            m = lower_median(np.abs(e))

    origin = window_origin(win, cfg)
    tau = (int(win.t_A[-1]) - origin) / TICKS_PER_SECOND
    delta, a0, a1, a2 = (float(v) for v in x)
    return RangeEstimate(
        n=win.n,
        t_A_n=int(win.t_A[-1]),
        d_hat=a0 + a1 * tau + a2 * tau * tau,
        delta_hat=delta,
        a0=a0,
        a1=a1,
        a2=a2,
        origin=origin,
        diagnostics=FitDiagnostics(e, m, weights, cond),
    )


def _runs(records: Sequence[ExchangeRecord]):
    run = 0
    for i, rec in enumerate(records):
        run = run + 1 if i and rec.n == records[i - 1].n + 1 else 1
        yield i, run


def count_full_windows(records: Sequence[ExchangeRecord], w: int) -> int:
    """Number of periods ending a run of ``w+1`` consecutive records."""
    return sum(run >= w + 1 for _, run in _runs(records))


def estimate_trace(
    records: Sequence[ExchangeRecord],
    cfg: EstimatorConfig = EstimatorConfig(),
) -> list[RangeEstimate]:
    """Causal sliding-window estimates for every period with a full window.

    Periods without ``w+1`` trailing consecutive records, or whose window is
    degenerate, are skipped.
    """
    out = []
    for i, run in _runs(records):
        if run < cfg.w + 1:
            continue
        try:
            out.append(robust_fit(build_window(records[i - cfg.w : i + 1]), cfg))
        except DegenerateWindowError:
            continue
    return out


def rtt_estimate(rec: ExchangeRecord, c: float = SPEED_OF_LIGHT) -> float:
    """Round-trip-time range, ignoring drift and motion between the stamps."""
    ticks = (rec.t_A - rec.t_D) - (rec.s_D - rec.s_A)
    return c / 2 * ticks / TICKS_PER_SECOND
