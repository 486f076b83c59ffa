"""Integer tick time base and vehicle clock models.

All timestamps are signed integer counts of 0.1 ns ticks. Floating-point
seconds only appear at I/O boundaries; arithmetic on timestamps (differences,
modular reduction) stays in Python integers so nanosecond-scale residuals on
top of 10^10-tick quantities are never lost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np

TICKS_PER_SECOND = 10**10
SPEED_OF_LIGHT = 299_792_458.0  # m/s
MAX_TICK = 2**63 - 1
MAX_DRIFT = 1e-3


def div_round(num: int, den: int) -> int:
    """Round ``num / den`` to the nearest integer, halves rounded up."""
    if den <= 0:
        raise ValueError("denominator must be positive")
    return (2 * num + den) // (2 * den)


def seconds_to_ticks(x: float) -> int:
    """Convert seconds to the nearest tick (exact rational rounding)."""
    if not math.isfinite(x):
        raise OverflowError(f"cannot convert {x!r} seconds to ticks")
    f = Fraction(x)
    v = div_round(f.numerator * TICKS_PER_SECOND, f.denominator)
    if abs(v) > MAX_TICK:
        raise OverflowError(f"{x!r} s does not fit in a 64-bit tick count")
    return v


def ticks_to_seconds(v: int) -> float:
    """Convert ticks to seconds. For display and geometry only."""
    if abs(v) > MAX_TICK:
        raise OverflowError(f"{v} ticks outside the 64-bit range")
    return int(v) / TICKS_PER_SECOND


@dataclass(frozen=True)
class ClockModel:
    """Affine map from true time to a vehicle's local clock.

    ``s(t) = theta + (1 + delta) * t`` with ``theta`` in seconds and ``delta``
    dimensionless. ``drift_walk_std`` (per sqrt(second)) makes ``delta`` wander
    as a Gaussian random walk; such clocks need a :class:`WalkingClock` stream.
    """

    theta: float = 0.0
    delta: float = 0.0
    drift_walk_std: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.theta) and math.isfinite(self.delta)):
            raise ValueError("clock parameters must be finite")
        if abs(self.delta) > MAX_DRIFT:
            raise ValueError(f"|delta| = {abs(self.delta):g} exceeds {MAX_DRIFT:g}")
        if not self.drift_walk_std >= 0:
            raise ValueError("drift_walk_std must be >= 0")

    @cached_property
    def _affine(self) -> tuple[int, int, int]:
        # local ticks = (offset + rate * t) / den, all integers
        off = Fraction(self.theta) * TICKS_PER_SECOND
        rate = 1 + Fraction(self.delta)
        den = math.lcm(off.denominator, rate.denominator)
        return (
            off.numerator * (den // off.denominator),
            rate.numerator * (den // rate.denominator),
            den,
        )

    def local_ticks(self, t_true: int, extra_s: float = 0.0) -> int:
        """Local reading at true tick ``t_true`` plus ``extra_s`` seconds.

        ``extra_s`` carries propagation delay and receiver noise, which are not
        scaled by the clock rate.
        """
        if self.drift_walk_std:
            raise ValueError("walking-drift clock needs an RNG stream; use WalkingClock")
        off, rate, den = self._affine
        num = off + rate * int(t_true)
        if not extra_s:
            return div_round(num, den)
        q, r = divmod(num, den)
        return q + math.floor(r / den + extra_s * TICKS_PER_SECOND + 0.5)


class WalkingClock:
    """Single-owner clock stream whose drift performs a Gaussian random walk.

    The drift is held constant between queries and then perturbed by
    ``N(0, drift_walk_std**2 * dt)``, so queries must arrive in time order.
    """

    def __init__(self, model: ClockModel, rng: np.random.Generator, t0: int = 0):
        self.model = model
        self.delta = model.delta
        self._rng = rng
        self._t = int(t0)
        self._local = Fraction(model.theta) * TICKS_PER_SECOND + (1 + Fraction(model.delta)) * self._t

    def local_ticks(self, t_true: int, extra_s: float = 0.0) -> int:
        t_true = int(t_true)
        if t_true < self._t:
            raise ValueError("non-monotone clock query")
        dt = t_true - self._t
        if dt:
            self._local += (1 + Fraction(self.delta)) * dt
            if self.model.drift_walk_std:
                step = self.model.drift_walk_std * math.sqrt(dt / TICKS_PER_SECOND)
                self.delta += float(self._rng.normal(0.0, step))
            self._t = t_true
        return math.floor(self._local + Fraction(extra_s) * TICKS_PER_SECOND + Fraction(1, 2))


def to_local(clock: ClockModel | WalkingClock, t_true: int, extra_s: float = 0.0) -> int:
    """Local clock reading (ticks) at true time ``t_true`` (ticks)."""
    return clock.local_ticks(t_true, extra_s)
