"""Inter-vehicle range estimation from periodic broadcast timestamps."""

from .chrono import SPEED_OF_LIGHT, TICKS_PER_SECOND, ClockModel, seconds_to_ticks, ticks_to_seconds, to_local
from .codec import CodecBounds, CompressedDelta, bootstrap_decompress, compress, decompress_incremental, required_bits
from .estimator import EstimatorConfig, RangeEstimate, estimate_trace, robust_fit, rtt_estimate, whitening_cov
from .metrics import MetricsReport, compute_metrics
from .protocol import BroadcastMessage, PiggybackEntry, decode, encode, run_protocol
from .sim import ExchangeRecord, NoiseModel, ScenarioConfig, Trajectory, VehicleSpec, simulate_trace

__all__ = [
    "SPEED_OF_LIGHT",
    "TICKS_PER_SECOND",
    "BroadcastMessage",
    "ClockModel",
    "CodecBounds",
    "CompressedDelta",
    "EstimatorConfig",
    "ExchangeRecord",
    "MetricsReport",
    "NoiseModel",
    "PiggybackEntry",
    "RangeEstimate",
    "ScenarioConfig",
    "Trajectory",
    "VehicleSpec",
    "bootstrap_decompress",
    "compress",
    "compute_metrics",
    "decode",
    "decompress_incremental",
    "encode",
    "estimate_trace",
    "required_bits",
    "robust_fit",
    "rtt_estimate",
    "run_protocol",
    "seconds_to_ticks",
    "simulate_trace",
    "ticks_to_seconds",
    "to_local",
    "whitening_cov",
]
