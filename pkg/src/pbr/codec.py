"""L-bit timestamp delta compression.

A delta (in ticks) is sent modulo ``2**L``. The receiver restores the
discarded high bits by predicting the delta from the previous ratio of remote
to local interval lengths, which changes only slowly with motion and noise.
A stream can also be started from two compressed values by searching the
small set of high-bit candidates allowed by an absolute drift bound.

All decisions use exact integer or rational arithmetic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, NamedTuple, Optional

from .chrono import SPEED_OF_LIGHT, div_round

log = logging.getLogger(__name__)

DEFAULT_BITS = 15
MAX_BITS = 48


class ImplausibleDeltaError(ValueError):
    pass


class EmptyCandidateSetError(ValueError):
    pass


@dataclass(frozen=True)
class CompressedDelta:
    value: int
    L: int = DEFAULT_BITS

    def __post_init__(self):
        if not 1 <= self.L <= MAX_BITS:
            raise ValueError(f"bit width {self.L} outside 1..{MAX_BITS}")
        if not 0 <= self.value < (1 << self.L):
            raise ValueError(f"compressed value {self.value} does not fit in {self.L} bits")


@dataclass(frozen=True)
class CodecBounds:
    """``rho``: bound on the change of the interval ratio between deltas.
    ``rho_tilde``: bound on the ratio's distance from 1 (drift included)."""

    rho: float = 300.0 / SPEED_OF_LIGHT
    rho_tilde: float = 5e-5

    def __post_init__(self):
        if not 0 < self.rho < self.rho_tilde < 1:
            raise ValueError("bounds must satisfy 0 < rho < rho_tilde < 1")


def compress(delta: int, L: int = DEFAULT_BITS) -> CompressedDelta:
    if delta < 0:
        raise ValueError(f"cannot compress negative delta {delta}")
    if not 1 <= L <= MAX_BITS:
        raise ValueError(f"bit width {L} outside 1..{MAX_BITS}")
    return CompressedDelta(delta % (1 << L), L)


def decompress_incremental(c: CompressedDelta, prev_delta: int, dt_n: int, dt_prev: int) -> int:
    """Recover a delta assuming its interval ratio matches the previous one.

    ``dt_n`` and ``dt_prev`` are the locally measured intervals matching the
    current and previous delta.
    """
    if dt_n <= 0 or dt_prev <= 0:
        raise ValueError("reference intervals must be positive")
    mod = 1 << c.L
    # round((prev_delta * dt_n / dt_prev - value) / 2^L), halves up
    k = div_round(prev_delta * dt_n - c.value * dt_prev, dt_prev * mod)
    if k < 0:
        raise ImplausibleDeltaError(f"implausible delta: k = {k}")
    return c.value + k * mod


def required_bits(rho: float, dt: int) -> int:
    """Smallest ``L >= 1`` with ``2**L > 2 * rho * dt`` (``dt`` in ticks)."""
    if rho < 0 or dt <= 0:
        raise ValueError("rho must be >= 0 and dt > 0")
    bound = 2 * Fraction(rho) * dt
    return max(1, int(bound).bit_length())


def candidate_set(c: CompressedDelta, dt: int, rho_tilde: float) -> range:
    """All ``k`` with ``|(value + k 2^L) / dt - 1| <= rho_tilde``."""
    if dt <= 0:
        raise ValueError("reference interval must be positive")
    rt = Fraction(rho_tilde)
    mod = 1 << c.L
    lo = dt * (1 - rt) - c.value
    hi = dt * (1 + rt) - c.value
    k_lo = -((-lo) // mod)  # ceil
    k_hi = hi // mod
    if k_hi < k_lo:
        raise EmptyCandidateSetError("bounds exclude all candidates")
    return range(int(k_lo), int(k_hi) + 1)


class BootstrapResult(NamedTuple):
    delta1: int
    delta2: int
    ambiguous: bool


def bootstrap_decompress(
    c1: CompressedDelta,
    c2: CompressedDelta,
    dt1: int,
    dt2: int,
    bounds: CodecBounds = CodecBounds(),
) -> BootstrapResult:
    """Jointly recover two deltas whose interval ratios should agree.

    Minimizes ``|d1/dt1 - d2/dt2|`` over both candidate sets; ties go to the
    smaller ``k1`` and then the smaller ``k2``. The result is flagged
    ambiguous when the runner-up is within ``rho`` of the optimum.
    """
    K1 = candidate_set(c1, dt1, bounds.rho_tilde)
    K2 = candidate_set(c2, dt2, bounds.rho_tilde)
    m1, m2 = 1 << c1.L, 1 << c2.L
    # objective scaled by dt1*dt2 to stay in integers
    best = second = None
    pick = None
    for k1 in K1:
        d1 = c1.value + k1 * m1
        for k2 in K2:
            d2 = c2.value + k2 * m2
            obj = abs(d1 * dt2 - d2 * dt1)
            if best is None or obj < best:
                second, best, pick = best, obj, (d1, d2)
            elif second is None or obj < second:
                second = obj
    ambiguous = second is not None and (second - best) <= Fraction(bounds.rho) * dt1 * dt2
    return BootstrapResult(pick[0], pick[1], ambiguous)


class StreamDecoder:
    """Sequential decoder for one compressed delta stream.

    Each pushed value comes with its locally measured reference interval.
    The decoder keeps the last recovered (delta, interval) pair. When no pair
    is known, or after an implausible decode, it buffers two compressed values
    and restarts from them with :func:`bootstrap_decompress`.
    """

    def __init__(self, bits: int = DEFAULT_BITS, bounds: CodecBounds = CodecBounds()):
        self.bits = bits
        self.bounds = bounds
        self.prev: Optional[tuple[int, int]] = None
        self.pending: list[tuple[CompressedDelta, int, Any]] = []
        self.resyncs = 0
        self.ambiguous_bootstraps = 0

    @property
    def synced(self) -> bool:
        return self.prev is not None

    def push_full(self, delta: int, dt: Optional[int], tag: Any = None) -> list[tuple[Any, int]]:
        """Accept an uncompressed delta; ``dt`` may be None if unknown."""
        self.pending.clear()
        self.prev = (delta, dt) if dt else None
        return [(tag, delta)]

    def push(self, c: CompressedDelta, dt: int, tag: Any = None) -> list[tuple[Any, int]]:
        """Decode ``c``; returns ``(tag, delta)`` pairs recovered by this call."""
        if self.prev is not None:
            prev_delta, prev_dt = self.prev
            try:
                delta = decompress_incremental(c, prev_delta, dt, prev_dt)
                self._check(delta, dt)
            except ImplausibleDeltaError as exc:
                self.prev = None
                self.resyncs += 1
                log.warning("delta stream lost sync (%s); re-bootstrapping", exc)
            else:
                self.prev = (delta, dt)
                return [(tag, delta)]
        self.pending.append((c, dt, tag))
        if len(self.pending) < 2:
            return []
        (ca, dta, taga), (cb, dtb, tagb) = self.pending[-2:]
        self.pending.clear()
        try:
            res = bootstrap_decompress(ca, cb, dta, dtb, self.bounds)
        except EmptyCandidateSetError:
            self.pending.append((cb, dtb, tagb))
            return []
        if res.ambiguous:
            self.ambiguous_bootstraps += 1
        self.prev = (res.delta2, dtb)
        return [(taga, res.delta1), (tagb, res.delta2)]

    def _check(self, delta: int, dt: int) -> None:
        # decoded ratio must stay within the absolute drift bound
        if abs(Fraction(delta, dt) - 1) > Fraction(self.bounds.rho_tilde):
            raise ImplausibleDeltaError(f"implausible delta: ratio {delta / dt:.9f} outside bound")


@dataclass
class RoundTripReport:
    total_deltas: int = 0
    exact_recoveries: int = 0
    failures: int = 0
    undecoded: int = 0
    resyncs: int = 0
    ambiguous_bootstraps: int = 0

    @property
    def all_exact(self) -> bool:
        return self.total_deltas > 0 and self.exact_recoveries == self.total_deltas


def trace_streams(records) -> dict[str, list[tuple[int, int]]]:
    """The four delta streams of a trace as ``(delta, reference interval)``.

    Deltas run between consecutive surviving records, so a dropped period
    widens the next delta instead of breaking the stream.
    """
    streams: dict[str, list[tuple[int, int]]] = {"s_A": [], "s_D": [], "t_D": [], "t_A": []}
    for prev, cur in zip(records, records[1:]):
        dt_D = cur.t_D - prev.t_D
        ds_A = cur.s_A - prev.s_A
        dt_A = cur.t_D - prev.t_A
        ds_D = cur.s_A - prev.s_D
        streams["s_A"].append((ds_A, dt_D))
        streams["s_D"].append((ds_D, dt_A))
        streams["t_D"].append((dt_D, ds_A))
        streams["t_A"].append((dt_A, ds_D))
    return streams


def roundtrip_stream(
    pairs: list[tuple[int, int]],
    L: int = DEFAULT_BITS,
    bounds: CodecBounds = CodecBounds(),
    full_first: int = 2,
) -> RoundTripReport:
    """Compress and sequentially decode one stream, counting exact recoveries.

    The first ``full_first`` deltas travel uncompressed.
    """
    dec = StreamDecoder(L, bounds)
    rep = RoundTripReport()
    recovered: dict[int, int] = {}
    for i, (delta, dt) in enumerate(pairs):
        if i < full_first:
            dec.push_full(delta, dt, i)
            continue
        rep.total_deltas += 1
        for tag, value in dec.push(compress(delta, L), dt, i):
            recovered[tag] = value
    for i, (delta, _) in enumerate(pairs[full_first:], start=full_first):
        if i not in recovered:
            rep.undecoded += 1
        elif recovered[i] == delta:
            rep.exact_recoveries += 1
        else:
            rep.failures += 1
    rep.resyncs = dec.resyncs
    rep.ambiguous_bootstraps = dec.ambiguous_bootstraps
    return rep


def roundtrip_trace(records, L: int = DEFAULT_BITS, bounds: CodecBounds = CodecBounds()) -> dict[str, RoundTripReport]:
    return {name: roundtrip_stream(pairs, L, bounds) for name, pairs in trace_streams(records).items()}
