"""Error statistics for range estimates against ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

PERCENTILES = (50, 90, 95)


@dataclass(frozen=True)
class MetricsReport:
    rmse: Optional[float]
    percentile_errors: dict[int, Optional[float]]
    cdf: list[tuple[float, float]] = field(default_factory=list)
    count: int = 0
    skipped_windows: int = 0

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "percentile_errors": {str(p): v for p, v in self.percentile_errors.items()},
            "cdf": [list(pt) for pt in self.cdf],
            "count": self.count,
            "skipped_windows": self.skipped_windows,
        }


def nearest_rank(sorted_values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ``ceil(p/100 * N)``-th smallest value."""
    if not sorted_values:
        raise ValueError("no values")
    if not 0 < p <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    rank = max(1, math.ceil(p / 100 * len(sorted_values)))
    return sorted_values[rank - 1]


def compute_metrics(errors: Sequence[float], skipped_windows: int = 0) -> MetricsReport:
    """Summarize signed or absolute errors (meters).

    The CDF lists each sorted absolute error with its cumulative fraction.
    """
    abs_err = sorted(abs(float(e)) for e in errors)
    n = len(abs_err)
    if n == 0:
        return empty_metrics(skipped_windows)
    rmse = math.sqrt(math.fsum(e * e for e in abs_err) / n)
    cdf = [(e, (i + 1) / n) for i, e in enumerate(abs_err)]
    return MetricsReport(
        rmse=rmse,
        percentile_errors={p: nearest_rank(abs_err, p) for p in PERCENTILES},
        cdf=cdf,
        count=n,
        skipped_windows=skipped_windows,
    )


def empty_metrics(skipped_windows: int = 0) -> MetricsReport:
    """Report with null statistics, used when no ground truth is available."""
    return MetricsReport(None, {p: None for p in PERCENTILES}, [], 0, skipped_windows)
