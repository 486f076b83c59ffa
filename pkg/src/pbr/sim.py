"""Ground-truth trajectories and synthetic broadcast timestamp traces.

Every vehicle broadcasts once per period. A broadcast is stamped on the
sender's clock at departure and on each receiver's clock at arrival; the
arrival stamp carries the propagation delay ``d/c`` plus receiver noise.
Movement and drift during the time of flight are ignored, so departure and
arrival share one true instant.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .chrono import (
    SPEED_OF_LIGHT,
    TICKS_PER_SECOND,
    ClockModel,
    WalkingClock,
    seconds_to_ticks,
    ticks_to_seconds,
)

DEFAULT_MAX_SPEED = 100.0  # m/s


class ConfigError(ValueError):
    """Invalid scenario configuration. ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-linear planar path; queries outside the waypoints clamp."""

    waypoints: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        wp = tuple(tuple(float(v) for v in p) for p in self.waypoints)
        if not wp:
            raise ValueError("trajectory needs at least one waypoint")
        if any(len(p) != 3 for p in wp):
            raise ValueError("waypoints are (t, x, y) triples")
        if any(b[0] <= a[0] for a, b in zip(wp, wp[1:])):
            raise ValueError("waypoint times must be strictly increasing")
        object.__setattr__(self, "waypoints", wp)
        arr = np.asarray(wp, dtype=float)
        object.__setattr__(self, "_t", arr[:, 0])
        object.__setattr__(self, "_x", arr[:, 1])
        object.__setattr__(self, "_y", arr[:, 2])

    @classmethod
    def fixed(cls, x: float, y: float = 0.0) -> "Trajectory":
        return cls(((0.0, x, y),))

    def position(self, t):
        """Interpolated (x, y); ``t`` may be a scalar or an array of seconds."""
        return np.interp(t, self._t, self._x), np.interp(t, self._t, self._y)

    @property
    def max_speed(self) -> float:
        if len(self.waypoints) < 2:
            return 0.0
        return float(np.max(np.hypot(np.diff(self._x), np.diff(self._y)) / np.diff(self._t)))


def distance_at(a: Trajectory, b: Trajectory, t):
    """Euclidean distance in meters between two trajectories at time ``t``."""
    ax, ay = a.position(t)
    bx, by = b.position(t)
    return np.hypot(ax - bx, ay - by)


@dataclass(frozen=True)
class NoiseModel:
    """Receiver timestamp noise expressed in meters of range.

    Gaussian jitter with std ``sigma_m`` plus, with probability ``p_nlos``, a
    positive exponential non-line-of-sight bias of mean ``nlos_mean_m``.
    ``p_drop`` is the per-reception loss probability.
    """

    sigma_m: float = 0.0
    p_nlos: float = 0.0
    nlos_mean_m: float = 0.0
    p_drop: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p_nlos < 1:
            raise ConfigError("p_nlos", "must be in [0, 1)")
        if not 0 <= self.p_drop < 1:
            raise ConfigError("p_drop", "must be in [0, 1)")
        if not self.sigma_m >= 0:
            raise ConfigError("sigma_m", "must be >= 0")
        if not self.nlos_mean_m >= 0:
            raise ConfigError("nlos_mean_m", "must be >= 0")


def sample_noise(model: NoiseModel, rng: np.random.Generator, size=None):
    """Draw receiver noise in seconds (scalar when ``size`` is None)."""
    shape = () if size is None else size
    z = rng.normal(0.0, model.sigma_m, shape) if model.sigma_m else np.zeros(shape)
    if model.p_nlos and model.nlos_mean_m:
        hit = rng.random(shape) < model.p_nlos
        z = z + np.where(hit, rng.exponential(model.nlos_mean_m, shape), 0.0)
    z = z / SPEED_OF_LIGHT
    return float(z) if size is None else z


@dataclass(frozen=True)
class VehicleSpec:
    name: str
    trajectory: Trajectory
    clock: ClockModel = ClockModel()


@dataclass(frozen=True)
class ScenarioConfig:
    """A multi-vehicle broadcast scenario.

    The first vehicle is the local one. With ``half_period_offset`` vehicle
    ``v`` of ``N`` transmits ``v*T/N`` after the first (``T/2`` for a pair);
    otherwise phases are drawn uniformly from the seed. ``reply_delay_s``
    overrides the phase of the second vehicle of a pair, e.g. to emulate
    unicast-scale turnarounds.
    """

    vehicles: tuple[VehicleSpec, ...]
    duration_s: float
    noise: NoiseModel = NoiseModel()
    period_s: float = 0.1
    jitter_s: float = 1e-3
    half_period_offset: bool = True
    reply_delay_s: Optional[float] = None
    max_speed: float = DEFAULT_MAX_SPEED

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        if not self.period_s > 0:
            raise ConfigError("period_s", "must be > 0")
        if not 0 <= self.jitter_s < self.period_s / 4:
            raise ConfigError("jitter_s", "must satisfy 0 <= jitter_s < period_s/4")
        if not self.duration_s > 0:
            raise ConfigError("duration_s", "must be > 0")
        if len(self.vehicles) < 2:
            raise ConfigError("traj", "need at least two vehicles")
        names = [v.name for v in self.vehicles]
        if len(set(names)) != len(names):
            raise ConfigError("traj", "duplicate vehicle names")
        for v in self.vehicles:
            if v.trajectory.max_speed > self.max_speed:
                raise ConfigError(
                    f"traj.{v.name}.waypoints",
                    f"implied speed {v.trajectory.max_speed:.3g} m/s exceeds max_speed",
                )
        if self.reply_delay_s is not None:
            if len(self.vehicles) != 2:
                raise ConfigError("reply_delay_s", "only defined for two vehicles")
            if not 2 * self.jitter_s < self.reply_delay_s < self.period_s - 2 * self.jitter_s:
                raise ConfigError("reply_delay_s", "must exceed twice the jitter and stay within one period")
        elif self.half_period_offset:
            if 2 * self.jitter_s >= self.period_s / len(self.vehicles):
                raise ConfigError("jitter_s", "jitter too large for the staggered schedule")

    @property
    def periods(self) -> int:
        return int(round(self.duration_s / self.period_s))

    def with_noise(self, **changes) -> "ScenarioConfig":
        return replace(self, noise=replace(self.noise, **changes))


@dataclass(frozen=True)
class ExchangeRecord:
    """One period's four timestamps seen from the local vehicle.

    ``t_D``/``t_A`` are on the local clock, ``s_A``/``s_D`` on the remote one.
    ``s_D`` may be ``None`` for the newest record of a live session, since the
    remote's departure time arrives with its next message.
    """

    n: int
    t_D: int
    s_A: int
    s_D: Optional[int]
    t_A: int
    truth_d_D: Optional[float] = None
    truth_d_A: Optional[float] = None


@dataclass
class Broadcast:
    sender: int
    seq: int
    true_tick: int
    local_tick: int
    arrivals: dict[int, Optional[int]] = field(default_factory=dict)


@dataclass
class NetworkLog:
    """All broadcasts of a scenario in true-time order."""

    config: ScenarioConfig
    broadcasts: list[Broadcast]

    def by_sender(self, v: int) -> list[Broadcast]:
        return [b for b in self.broadcasts if b.sender == v]

    def distance(self, a: int, b: int, true_tick: int) -> float:
        ta = self.config.vehicles[a].trajectory
        tb = self.config.vehicles[b].trajectory
        return float(distance_at(ta, tb, ticks_to_seconds(true_tick)))


def _phases(cfg: ScenarioConfig, rng: np.random.Generator) -> list[float]:
    n = len(cfg.vehicles)
    if cfg.reply_delay_s is not None:
        return [0.0, cfg.reply_delay_s]
    if cfg.half_period_offset:
        return [v * cfg.period_s / n for v in range(n)]
    return [0.0] + list(rng.uniform(0.0, cfg.period_s, n - 1))


def simulate_network(cfg: ScenarioConfig, seed: Optional[int] = None) -> NetworkLog:
    """Generate every broadcast and its receptions. Deterministic per seed."""
    seed = cfg.noise.seed if seed is None else seed
    nveh = len(cfg.vehicles)
    streams = np.random.SeedSequence(seed).spawn(4 + nveh)
    sched_rng, noise_rng, drop_rng, phase_rng = (np.random.default_rng(s) for s in streams[:4])
    phases = _phases(cfg, phase_rng)

    broadcasts = []
    for v in range(nveh):
        n = np.arange(cfg.periods)
        jitter = sched_rng.uniform(-cfg.jitter_s, cfg.jitter_s, cfg.periods) if cfg.jitter_s else np.zeros(cfg.periods)
        times = n * cfg.period_s + phases[v] + cfg.jitter_s + jitter
        for seq, t in enumerate(times):
            broadcasts.append(Broadcast(v, seq, seconds_to_ticks(float(t)), 0))
    broadcasts.sort(key=lambda b: (b.true_tick, b.sender))

    clocks = [
        WalkingClock(spec.clock, np.random.default_rng(streams[4 + i])) if spec.clock.drift_walk_std else spec.clock
        for i, spec in enumerate(cfg.vehicles)
    ]
    shape = (len(broadcasts), nveh)
    z = sample_noise(cfg.noise, noise_rng, shape)
    lost = drop_rng.random(shape) < cfg.noise.p_drop if cfg.noise.p_drop else np.zeros(shape, bool)

    secs = np.array([b.true_tick for b in broadcasts]) / TICKS_PER_SECOND
    pos = [spec.trajectory.position(secs) for spec in cfg.vehicles]
    for i, b in enumerate(broadcasts):
        b.local_tick = clocks[b.sender].local_ticks(b.true_tick)
        sx, sy = pos[b.sender][0][i], pos[b.sender][1][i]
        for r in range(nveh):
            if r == b.sender:
                continue
            if lost[i, r]:
                b.arrivals[r] = None
                continue
            d = math.hypot(pos[r][0][i] - sx, pos[r][1][i] - sy)
            b.arrivals[r] = clocks[r].local_ticks(b.true_tick, d / SPEED_OF_LIGHT + z[i, r])
    return NetworkLog(cfg, broadcasts)


def pairwise_trace(log: NetworkLog, local: int, remote: int) -> list[ExchangeRecord]:
    """Exchange records between two vehicles of a network log.

    Local message ``n`` is paired with the first remote broadcast after it; the
    record is kept only when both messages were received and the remote
    broadcast precedes local message ``n+1``.
    """
    mine = log.by_sender(local)
    theirs = log.by_sender(remote)
    their_ticks = np.array([b.true_tick for b in theirs])
    out = []
    for k, b in enumerate(mine):
        j = int(np.searchsorted(their_ticks, b.true_tick, side="right"))
        if j >= len(theirs):
            break
        reply = theirs[j]
        if k + 1 < len(mine) and reply.true_tick >= mine[k + 1].true_tick:
            continue
        s_A = b.arrivals[remote]
        t_A = reply.arrivals[local]
        if s_A is None or t_A is None:
            continue
        out.append(
            ExchangeRecord(
                n=b.seq,
                t_D=b.local_tick,
                s_A=s_A,
                s_D=reply.local_tick,
                t_A=t_A,
                truth_d_D=log.distance(local, remote, b.true_tick),
                truth_d_A=log.distance(local, remote, reply.true_tick),
            )
        )
    return out


def simulate_trace(cfg: ScenarioConfig, seed: Optional[int] = None) -> list[ExchangeRecord]:
    """Two-vehicle trace between the first (local) and second (remote) vehicle."""
    return pairwise_trace(simulate_network(cfg, seed), 0, 1)


# --- trace CSV -------------------------------------------------------------

TRACE_COLUMNS = ["n", "t_D", "s_A", "s_D", "t_A", "d_D_true", "d_A_true"]


def write_trace(records: Iterable[ExchangeRecord], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in records:
        truth = ["" if v is None else f"{v:.9f}" for v in (r.truth_d_D, r.truth_d_A)]
        w.writerow([r.n, r.t_D, r.s_A, r.s_D, r.t_A, *truth])


def read_trace(fh, name: str = "<trace>") -> list[ExchangeRecord]:
    """Parse a trace CSV. Truth columns are optional."""
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or header[:5] != TRACE_COLUMNS[:5]:
        raise TraceFormatError(f"{name}:1: expected header starting with {','.join(TRACE_COLUMNS[:5])}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) not in (5, 7) or len(row) != len(header):
            raise TraceFormatError(f"{name}:{lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            n, t_D, s_A, s_D, t_A = (int(v) for v in row[:5])
            truth = [float(v) if v.strip() else None for v in row[5:7]] + [None, None]
        except ValueError as exc:
            raise TraceFormatError(f"{name}:{lineno}: {exc}") from None
        if out and n <= out[-1].n:
            raise TraceFormatError(f"{name}:{lineno}: sequence numbers must increase")
        out.append(ExchangeRecord(n, t_D, s_A, s_D, t_A, truth[0], truth[1]))
    return out


# --- scenario config files -------------------------------------------------

_SCALAR_KEYS = {
    "period_s": float,
    "jitter_s": float,
    "duration_s": float,
    "reply_delay_s": float,
    "max_speed": float,
    "sigma_m": float,
    "p_nlos": float,
    "nlos_mean_m": float,
    "p_drop": float,
    "seed": int,
}
_CLOCK_KEYS = ("theta", "delta", "drift_walk_std")
_NOISE_KEYS = ("sigma_m", "p_nlos", "nlos_mean_m", "p_drop", "seed")


def _parse_bool(key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(key, f"not a boolean: {text!r}")


def _parse_waypoints(key: str, text: str) -> Trajectory:
    try:
        pts = [tuple(float(v) for v in part.split(":")) for part in text.split(";") if part.strip()]
        return Trajectory(tuple(pts))
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def parse_config(text: str) -> ScenarioConfig:
    """Parse a flat ``key = value`` scenario file.

    Vehicles are declared by ``traj.<name>.waypoints = t:x:y;t:x:y;...`` and
    ordered by first appearance; the first is the local vehicle. Optional
    ``clock.<name>.{theta,delta,drift_walk_std}`` set each clock.
    """
    scalars: dict = {}
    trajs: dict[str, Trajectory] = {}
    clocks: dict[str, dict[str, float]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        parts = key.split(".")
        if key in _SCALAR_KEYS:
            try:
                scalars[key] = _SCALAR_KEYS[key](value)
            except ValueError:
                raise ConfigError(key, f"bad value {value!r}") from None
        elif key == "half_period_offset":
            scalars[key] = _parse_bool(key, value)
        elif len(parts) == 3 and parts[0] == "traj" and parts[2] == "waypoints":
            trajs[parts[1]] = _parse_waypoints(key, value)
        elif len(parts) == 3 and parts[0] == "clock" and parts[2] in _CLOCK_KEYS:
            try:
                clocks.setdefault(parts[1], {})[parts[2]] = float(value)
            except ValueError:
                raise ConfigError(key, f"bad value {value!r}") from None
        else:
            raise ConfigError(key, "unknown key")

    if "duration_s" not in scalars:
        raise ConfigError("duration_s", "missing required key")
    for name in clocks:
        if name not in trajs:
            raise ConfigError(f"traj.{name}.waypoints", "missing required key")
    if len(trajs) < 2:
        raise ConfigError("traj.<vehicle>.waypoints", "missing required key (need two vehicles)")

    vehicles = []
    for name, traj in trajs.items():
        try:
            clock = ClockModel(**clocks.get(name, {}))
        except ValueError as exc:
            raise ConfigError(f"clock.{name}", str(exc)) from None
        vehicles.append(VehicleSpec(name, traj, clock))
    noise = NoiseModel(**{k: scalars.pop(k) for k in _NOISE_KEYS if k in scalars})
    return ScenarioConfig(vehicles=tuple(vehicles), noise=noise, **scalars)


def load_config(path: str | os.PathLike) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: ScenarioConfig) -> str:
    """Render a config in the ``key = value`` file format."""
    lines = [
        f"period_s = {cfg.period_s!r}",
        f"jitter_s = {cfg.jitter_s!r}",
        f"duration_s = {cfg.duration_s!r}",
        f"half_period_offset = {str(cfg.half_period_offset).lower()}",
        f"max_speed = {cfg.max_speed!r}",
    ]
    if cfg.reply_delay_s is not None:
        lines.append(f"reply_delay_s = {cfg.reply_delay_s!r}")
    for k in _NOISE_KEYS:
        lines.append(f"{k} = {getattr(cfg.noise, k)!r}")
    for v in cfg.vehicles:
        wp = ";".join(":".join(repr(c) for c in p) for p in v.trajectory.waypoints)
        lines.append(f"traj.{v.name}.waypoints = {wp}")
        for k in _CLOCK_KEYS:
            lines.append(f"clock.{v.name}.{k} = {getattr(v.clock, k)!r}")
    return "\n".join(lines) + "\n"


def two_vehicle(
    local: Trajectory,
    remote: Trajectory,
    duration_s: float,
    remote_clock: ClockModel = ClockModel(),
    local_clock: ClockModel = ClockModel(),
    **kwargs,
) -> ScenarioConfig:
    """Shorthand for the common local/remote pair scenario."""
    return ScenarioConfig(
        vehicles=(VehicleSpec("local", local, local_clock), VehicleSpec("remote", remote, remote_clock)),
        duration_s=duration_s,
        **kwargs,
    )


def sampled_trajectory(fn, t_end: float, step: float = 0.01) -> Trajectory:
    """Densely sampled piecewise-linear trajectory from ``fn(t) -> (x, y)``."""
    ts = np.arange(0.0, t_end + step / 2, step)
    return Trajectory(tuple((float(t), *map(float, fn(t))) for t in ts))
