"""Seeded Monte-Carlo studies of estimation error versus window size."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .chrono import ClockModel
from .estimator import DegenerateWindowError, EstimatorConfig, build_window, robust_fit
from .sim import NoiseModel, ScenarioConfig, Trajectory, simulate_trace, two_vehicle


def flyby_scenario(
    offset_m: float = 10.0,
    speed: float = 20.0,
    duration_s: float = 20.0,
    sigma_m: float = 0.3,
    delta: float = 1e-5,
    **kwargs,
) -> ScenarioConfig:
    """Remote vehicle passes a parked local one at ``offset_m`` lateral distance.

    Closest approach happens halfway through the scenario.
    """
    half = speed * duration_s / 2
    remote = Trajectory(((0.0, -half, offset_m), (duration_s, half, offset_m)))
    return two_vehicle(
        Trajectory.fixed(0.0),
        remote,
        duration_s,
        remote_clock=ClockModel(theta=1.0, delta=delta),
        noise=NoiseModel(sigma_m=sigma_m),
        **kwargs,
    )


def trial_errors(
    cfg: ScenarioConfig,
    windows: Sequence[int],
    seed: int,
    robust_iters: int = 0,
    periods: Optional[range] = None,
) -> dict[int, dict[int, float]]:
    """Signed errors ``d_hat - d_A`` per window size and period for one seed."""
    records = simulate_trace(cfg, seed)
    out: dict[int, dict[int, float]] = {}
    for w in windows:
        est_cfg = EstimatorConfig(w=w, robust_iters=robust_iters)
        errs = {}
        for i in range(w, len(records)):
            rec = records[i]
            if periods is not None and rec.n not in periods:
                continue
            if rec.n - records[i - w].n != w:
                continue
            try:
                est = robust_fit(build_window(records[i - w : i + 1]), est_cfg)
            except DegenerateWindowError:
                continue
            errs[rec.n] = est.d_hat - rec.truth_d_A
        out[w] = errs
    return out


@dataclass
class MonteCarloResult:
    windows: tuple[int, ...]
    periods: int
    period_s: float
    trials: int
    sum_sq: dict[int, np.ndarray]
    counts: dict[int, np.ndarray]

    def rmse(self, w: int) -> np.ndarray:
        """RMSE per period; NaN where no trial produced an estimate."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.sqrt(self.sum_sq[w] / self.counts[w])

    def region_rmse(self, w: int, periods: Iterable[int]) -> float:
        idx = np.fromiter(periods, dtype=int)
        total = int(self.counts[w][idx].sum())
        return math.sqrt(float(self.sum_sq[w][idx].sum()) / total) if total else math.nan

    def write_csv(self, fh) -> None:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["w", "n", "t_s", "rmse", "count"])
        for w in self.windows:
            rmse = self.rmse(w)
            for n in range(self.periods):
                if self.counts[w][n]:
                    out.writerow([w, n, f"{n * self.period_s:.6f}", f"{rmse[n]:.9g}", int(self.counts[w][n])])


def _trial(args):
    cfg, windows, seed, robust_iters, periods = args
    return trial_errors(cfg, windows, seed, robust_iters, periods)


def run_montecarlo(
    cfg: ScenarioConfig,
    windows: Sequence[int],
    trials: int,
    base_seed: int = 0,
    robust_iters: int = 0,
    periods: Optional[range] = None,
    jobs: int = 1,
) -> MonteCarloResult:
    """Repeat the scenario with seeds ``base_seed ^ trial``.

    Trial results are accumulated in trial order, so the output does not
    depend on ``jobs``. ``periods`` restricts which periods are estimated.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    windows = tuple(windows)
    tasks = [(cfg, windows, base_seed ^ t, robust_iters, periods) for t in range(trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_trial, tasks, chunksize=max(1, trials // (4 * jobs))))
    else:
        results = [_trial(t) for t in tasks]

    npd = cfg.periods
    sum_sq = {w: np.zeros(npd) for w in windows}
    counts = {w: np.zeros(npd, dtype=np.int64) for w in windows}
    for res in results:
        for w, errs in res.items():
            for n, e in errs.items():
                sum_sq[w][n] += e * e
                counts[w][n] += 1
    return MonteCarloResult(windows, npd, cfg.period_s, trials, sum_sq, counts)
