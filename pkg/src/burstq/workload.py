"""Synthetic arrival schedules reproducing the observed daily load shape.

Arrivals follow a non-homogeneous Poisson process with a piecewise-
constant hourly rate: a flat base, multiplied during Western-European
working hours and again during the two seasonal peaks, then normalized so
each day's expected count equals that day's total. By construction the
in-window/out-of-window hourly rate ratio equals the working-hours
multiplier exactly.

Dataset sizes come from a calibration mixture: one third of jobs fall at
or below the local-routing threshold (matching the observed local share),
the rest are log-uniform between just above the threshold and a few
thousand markers. Job durations are log-normal. These distributions are
calibrations, not observed facts.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ValidationError

SECONDS_PER_DAY = 86400.0
SECONDS_PER_HOUR = 3600.0


@dataclass(frozen=True)
class WorkloadProfile:
    base_jobs_per_day: float = 60.0
    remote_fraction: float = 40.0 / 60.0
    working_hours_multiplier: float = 1.5
    working_hours: tuple[int, int] = (9, 17)  # [start, end) UTC
    seasonal_multiplier: float = 2.0
    seasonal_months: tuple[int, ...] = (7, 11)  # July and November peaks
    start_date: str = "2013-03-01"
    # marker mixture: local mass uniform on [1, local_max], remote mass
    # log-uniform on [local_max+1, remote_max]
    local_max_markers: int = 100
    remote_max_markers: int = 3000
    sample_size_range: tuple[int, int] = (50, 500)
    # sleep-kernel duration: log-normal, median 10 virtual minutes
    duration_median_s: float = 600.0
    duration_sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.working_hours_multiplier < 1 or self.seasonal_multiplier < 1:
            raise ValidationError("rate multipliers must be >= 1")
        if not (0.0 <= self.remote_fraction <= 1.0):
            raise ValidationError("remote_fraction must be in [0, 1]")
        start, end = self.working_hours
        if not (0 <= start < end <= 24):
            raise ValidationError("working_hours must satisfy 0 <= start < end <= 24")

    def daily_total(self, date: dt.date) -> float:
        total = self.base_jobs_per_day
        if date.month in self.seasonal_months:
            total *= self.seasonal_multiplier
        return total

    def hourly_rates(self, date: dt.date) -> list[float]:
        """24 per-hour rates whose sum is exactly the day's total."""
        start, end = self.working_hours
        in_hours = end - start
        out_hours = 24 - in_hours
        weight_sum = self.working_hours_multiplier * in_hours + out_hours
        total = self.daily_total(date)
        rate_out = total / weight_sum
        rate_in = rate_out * self.working_hours_multiplier
        return [rate_in if start <= h < end else rate_out for h in range(24)]


@dataclass(frozen=True)
class Arrival:
    t: float  # seconds from horizon start
    kind: str
    params: dict[str, str]
    backend_override: Optional[str] = None
    owner: str = "sim"


def generate_workload(
    profile: WorkloadProfile, horizon_days: float, seed: int
) -> list[Arrival]:
    """Deterministic arrival schedule over ``horizon_days`` virtual days."""
    if horizon_days < 0:
        raise ValidationError("horizon must be >= 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    start = dt.date.fromisoformat(profile.start_date)
    arrivals: list[Arrival] = []
    horizon_s = horizon_days * SECONDS_PER_DAY

    n_days = math.ceil(horizon_days)
    for day in range(n_days):
        date = start + dt.timedelta(days=day)
        for hour, rate in enumerate(profile.hourly_rates(date)):
            base_t = day * SECONDS_PER_DAY + hour * SECONDS_PER_HOUR
            if base_t >= horizon_s:
                break
            count = int(rng.poisson(rate))
            offsets = np.sort(rng.uniform(0, SECONDS_PER_HOUR, size=count))
            for off in offsets:
                t = base_t + float(off)
                if t >= horizon_s:
                    continue
                arrivals.append(_draw_job(rng, profile, t))
    arrivals.sort(key=lambda a: a.t)
    return arrivals


def _draw_job(rng: np.random.Generator, profile: WorkloadProfile, t: float) -> Arrival:
    if rng.random() < 1.0 - profile.remote_fraction:
        markers = int(rng.integers(1, profile.local_max_markers + 1))
    else:
        lo = math.log(profile.local_max_markers + 1)
        hi = math.log(profile.remote_max_markers)
        markers = int(round(math.exp(rng.uniform(lo, hi))))
    samples = int(rng.integers(*profile.sample_size_range))
    duration_s = float(
        math.exp(math.log(profile.duration_median_s) + profile.duration_sigma * rng.normal())
    )
    return Arrival(
        t=t,
        kind="sleep",
        params={
            "duration_ms": str(int(duration_s * 1000)),
            "markers": str(markers),
            "samples": str(samples),
        },
    )
