import math

import pytest

from pbr.chrono import SPEED_OF_LIGHT, TICKS_PER_SECOND, ClockModel
from pbr.sim import NoiseModel, ScenarioConfig, Trajectory, VehicleSpec, sampled_trajectory, two_vehicle

# one tick of propagation time, in meters
METERS_PER_TICK = SPEED_OF_LIGHT / TICKS_PER_SECOND


def quadratic_distance(t):
    return 50.0 - 8.0 * t + 0.4 * t * t


def quadratic_scenario(duration_s=10.0, noise=NoiseModel(), **kwargs):
    """Parked local vehicle, remote range following ``quadratic_distance``."""
    remote = sampled_trajectory(lambda t: (quadratic_distance(t), 0.0), duration_s)
    return two_vehicle(
        Trajectory.fixed(0.0),
        remote,
        duration_s,
        remote_clock=ClockModel(theta=1.0, delta=1e-5),
        noise=noise,
        **kwargs,
    )


def tick_exact_static(ticks=1000, duration_s=5.0, **kwargs):
    """Static pair whose every timestamp is an exact tick count.

    The range is a whole number of ticks, there is no jitter and all events
    fall on multiples of 0.05 s, where 10 ppm drift accrues whole ticks.
    """
    return two_vehicle(
        Trajectory.fixed(0.0),
        Trajectory.fixed(ticks * METERS_PER_TICK),
        duration_s,
        remote_clock=ClockModel(theta=1.0, delta=1e-5),
        jitter_s=0.0,
        **kwargs,
    )


def tick_exact_quadratic(c0=1700, c1=-13, c2=1, half_periods=60):
    """Moving pair with range ``c0 + c1 k + c2 k^2`` ticks at event ``k``.

    Events happen every 0.05 s (departures alternate between vehicles), so
    sampled ranges are exactly quadratic in time with no rounding anywhere.
    """
    step = 0.05
    waypoints = tuple(
        (k * step, (c0 + c1 * k + c2 * k * k) * METERS_PER_TICK, 0.0) for k in range(half_periods + 1)
    )
    return two_vehicle(
        Trajectory.fixed(0.0),
        Trajectory(waypoints),
        half_periods * step,
        remote_clock=ClockModel(theta=1.0, delta=1e-5),
        jitter_s=0.0,
    )


@pytest.fixture
def quad_cfg():
    return quadratic_scenario()


def triangle_positions(a=667, b=1001, c=1334):
    """Three points whose pairwise ranges are whole tick counts.

    ``a`` separates vehicles 0-1, ``b`` 1-2 and ``c`` 0-2 (about 20, 30, 40 m).
    """
    a, b, c = (k * METERS_PER_TICK for k in (a, b, c))
    x = (a * a + c * c - b * b) / (2 * a)
    return [(0.0, 0.0), (a, 0.0), (x, math.sqrt(c * c - x * x))]


THREE_CLOCKS = (ClockModel(), ClockModel(theta=1.0, delta=1e-5), ClockModel(theta=-0.5, delta=-1e-5))


def static_triangle(duration_s=6.0):
    """Tick-exact three-vehicle scenario: 0.3 s period, no jitter.

    Phases are multiples of 0.1 s, over which 10 ppm drift accrues whole ticks.
    """
    vehicles = tuple(
        VehicleSpec(f"v{i}", Trajectory.fixed(*p), clock)
        for i, (p, clock) in enumerate(zip(triangle_positions(), THREE_CLOCKS))
    )
    return ScenarioConfig(vehicles, duration_s, period_s=0.3, jitter_s=0.0)


def moving_triangle(duration_s=10.0, noise=NoiseModel(sigma_m=0.3)):
    """Three vehicles in relative motion with drifting clocks and range noise."""
    tracks = (
        lambda t: (0.0, 0.0),
        lambda t: (20.0 + 3.0 * t, 0.5 * t),
        lambda t: (10.0 - 2.0 * t, 35.0 - 1.5 * t + 0.1 * t * t),
    )
    vehicles = tuple(
        VehicleSpec(f"v{i}", sampled_trajectory(fn, duration_s), clock)
        for i, (fn, clock) in enumerate(zip(tracks, THREE_CLOCKS))
    )
    return ScenarioConfig(vehicles, duration_s, noise=noise)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
