"""Post-hoc throughput analysis: how many producers saturate one consumer.

Works on the stats dictionaries the producer and consumer emit; no clocks or
live processes involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import WarcflowError


class ProfilerError(WarcflowError):
    pass


class InsufficientData(ProfilerError):
    pass


class UndefinedRatio(ProfilerError):
    pass


@dataclass
class ThroughputReport:
    producer_rate: float        # post-filter records/s, mean across workers
    consumer_rate: float        # samples/s of busy time, idle excluded
    recommended_ratio: int | None
    selectivity: float          # kept / read across all workers
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "producer_rate": self.producer_rate,
            "consumer_rate": self.consumer_rate,
            "recommended_ratio": self.recommended_ratio,
            "selectivity": self.selectivity,
            "error": self.error,
        }


def recommend_ratio(producer_rate: float, consumer_rate: float) -> int:
    """Least producer count that can keep one consumer busy."""
    if producer_rate <= 0 or consumer_rate <= 0:
        raise UndefinedRatio(
            f"rates must be positive, got producer={producer_rate} "
            f"consumer={consumer_rate}")
    return math.ceil(consumer_rate / producer_rate)


def measure_rates(producer_stats: list[dict], consumer_stats: dict) -> ThroughputReport:
    if not producer_stats:
        raise InsufficientData("no producer stats given")
    for stats in list(producer_stats) + [consumer_stats]:
        wall = stats.get("wall_time", 0.0)
        if wall < 1.0:
            raise InsufficientData(
                f"wall time {wall:.3f}s is below the 1s measurement floor")

    worker_rates = [s["records_kept"] / s["wall_time"] for s in producer_stats]
    producer_rate = sum(worker_rates) / len(worker_rates)

    busy = consumer_stats.get("busy_time", 0.0)
    samples = consumer_stats.get("samples_processed", 0)
    consumer_rate = samples / busy if busy > 0 else 0.0

    total_read = sum(s.get("records_read", 0) for s in producer_stats)
    total_kept = sum(s.get("records_kept", 0) for s in producer_stats)
    selectivity = total_kept / total_read if total_read else 0.0

    try:
        ratio = recommend_ratio(producer_rate, consumer_rate)
        error = None
    except UndefinedRatio as exc:
        ratio = None
        error = str(exc)
    return ThroughputReport(producer_rate, consumer_rate, ratio, selectivity, error)
