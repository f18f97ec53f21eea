"""Traffic computations: historical profiles, relative speeds, decrease ratios, labels.

All operations are pure functions over immutable inputs. Gaps in the speed
data are skipped, never zero-filled; when nothing is available the operation
raises instead of fabricating a value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from .errors import (
    InsufficientDataError,
    InvalidInputError,
    MissingHistoryError,
    NoUpstreamCoverageError,
)
from .model import (
    STEPS_PER_DAY,
    ClassThresholds,
    DEFAULT_THRESHOLDS,
    Direction,
    ImpactClass,
    Incident,
    TimeStep,
    TrafficFeatures,
    impact_class_from_ratio,
    step_at_or_after,
    step_time,
)

DEFAULT_SPAN_MILES = 2.0
PRE_INCIDENT_STEPS = 3


@dataclass(frozen=True)
class SensorMeta:
    """Identity and position of one speed sensor."""

    sensor_id: str
    roadway_id: str
    direction: Direction
    milepost: float


@dataclass(frozen=True)
class SensorSpeedSeries:
    """5-minute speed readings of one sensor, keyed by step index; gaps allowed."""

    meta: SensorMeta
    readings: Mapping[int, float]


@dataclass
class HistoricalProfile:
    """Per-(sensor, time-of-day slot) mean speeds and the number of days behind each mean."""

    mean_speed: Dict[Tuple[str, int], float] = field(default_factory=dict)
    support_count: Dict[Tuple[str, int], int] = field(default_factory=dict)

    def mean(self, sensor_id: str, slot: int) -> float:
        try:
            return self.mean_speed[(sensor_id, slot)]
        except KeyError:
            raise MissingHistoryError(
                f"no historical mean for sensor {sensor_id!r} at slot {slot}"
            ) from None

    def has(self, sensor_id: str, slot: int) -> bool:
        return (sensor_id, slot) in self.mean_speed


def build_historical_profile(
    series: Iterable[SensorSpeedSeries],
    period: Tuple[datetime, datetime],
    epoch: datetime,
) -> HistoricalProfile:
    """Average each sensor's readings per time-of-day slot over [period start, period end).

    Slots a sensor never reports in contribute no entry. Entries whose mean is
    not strictly positive are dropped as well, since they cannot normalize a
    decrease ratio.
    """
    start, end = period
    if not start < end:
        raise InvalidInputError(f"empty profile period: {start} .. {end}")
    series = list(series)
    if not series:
        raise InvalidInputError("no speed series supplied")

    profile = HistoricalProfile()
    for s in series:
        if not s.readings:
            continue
        idx = np.fromiter(s.readings.keys(), dtype=np.int64, count=len(s.readings))
        vals = np.fromiter(s.readings.values(), dtype=np.float64, count=len(s.readings))
        lo = _step_floor(start, epoch)
        hi = _step_floor(end, epoch)
        in_period = (idx >= lo) & (idx < hi)
        idx, vals = idx[in_period], vals[in_period]
        if idx.size == 0:
            continue
        slots = idx % STEPS_PER_DAY
        sums = np.zeros(STEPS_PER_DAY)
        counts = np.zeros(STEPS_PER_DAY, dtype=np.int64)
        np.add.at(sums, slots, vals)
        np.add.at(counts, slots, 1)
        for slot in np.nonzero(counts)[0]:
            mean = sums[slot] / counts[slot]
            if mean > 0 and math.isfinite(mean):
                profile.mean_speed[(s.meta.sensor_id, int(slot))] = float(mean)
                profile.support_count[(s.meta.sensor_id, int(slot))] = int(counts[slot])
    if not profile.mean_speed:
        raise InvalidInputError("no readings fall inside the profile period")
    return profile


def _step_floor(ts: datetime, epoch: datetime) -> int:
    delta = ts - epoch
    micros = (delta.days * 86_400 + delta.seconds) * 1_000_000 + delta.microseconds
    return micros // (300 * 1_000_000)


def relative_speed(
    profile: HistoricalProfile, sensor_id: str, t: TimeStep, measured: float
) -> float:
    """Measured speed minus the historical mean for that sensor and time of day."""
    return measured - profile.mean(sensor_id, t.slot_of_day)


def upstream_sensors(
    sensors: Iterable[SensorMeta],
    incident: Incident,
    span_miles: float = DEFAULT_SPAN_MILES,
) -> List[SensorMeta]:
    """Sensors in the closed span of span_miles immediately upstream of the incident.

    Upstream is against travel: smaller mileposts when the direction has
    increasing mileposts, larger otherwise. Ordered nearest first; a sensor
    exactly at the incident milepost is included.

    Raises:
        NoUpstreamCoverageError: if no sensor lies in the span.
    """
    mp = incident.milepost
    if incident.direction.milepost_increasing:
        lo, hi = mp - span_miles, mp
    else:
        lo, hi = mp, mp + span_miles
    matches = [
        s
        for s in sensors
        if s.roadway_id == incident.roadway_id
        and s.direction == incident.direction
        and lo <= s.milepost <= hi
    ]
    if not matches:
        raise NoUpstreamCoverageError(
            f"incident {incident.id}: no {incident.direction.value}-bound sensor on "
            f"{incident.roadway_id} within {span_miles} miles upstream of milepost {mp}"
        )
    matches.sort(key=lambda s: (abs(s.milepost - mp), s.sensor_id))
    return matches


def pre_incident_relative_speed(
    profile: HistoricalProfile,
    series: Mapping[str, SensorSpeedSeries],
    upstream: Sequence[SensorMeta],
    incident_step: TimeStep,
) -> float:
    """Mean relative speed over the upstream sensors in the 3 steps before the incident.

    One flat mean over all available (sensor, step) pairs; pairs missing a
    reading or a profile entry are skipped.
    """
    values = []
    for sensor in upstream:
        s = series.get(sensor.sensor_id)
        if s is None:
            continue
        for back in range(PRE_INCIDENT_STEPS, 0, -1):
            t = TimeStep(incident_step.index - back)
            measured = s.readings.get(t.index)
            if measured is None or not profile.has(sensor.sensor_id, t.slot_of_day):
                continue
            values.append(relative_speed(profile, sensor.sensor_id, t, measured))
    if not values:
        raise InsufficientDataError(
            f"no (sensor, step) pair available in the {PRE_INCIDENT_STEPS} steps "
            f"before step {incident_step.index}"
        )
    return float(np.mean(values))


def speed_decrease_ratio(rho: float, v_r: float, v_hat: float) -> float:
    """Clamped, historically normalized drop of a sensor's relative speed below rho."""
    if not (math.isfinite(rho) and math.isfinite(v_r) and math.isfinite(v_hat)):
        raise InvalidInputError("speed decrease ratio needs finite inputs")
    if v_hat <= 0:
        raise InvalidInputError(f"historical mean speed must be > 0, got {v_hat}")
    return max((rho - v_r) / v_hat, 0.0)


def overall_speed_decrease_ratio(
    profile: HistoricalProfile,
    series: Mapping[str, SensorSpeedSeries],
    upstream: Sequence[SensorMeta],
    rho: float,
    t: TimeStep,
) -> float:
    """Mean per-sensor speed decrease ratio over the upstream stretch at step t."""
    ratios = []
    for sensor in upstream:
        s = series.get(sensor.sensor_id)
        if s is None:
            continue
        measured = s.readings.get(t.index)
        if measured is None or not profile.has(sensor.sensor_id, t.slot_of_day):
            continue
        v_hat = profile.mean(sensor.sensor_id, t.slot_of_day)
        v_r = measured - v_hat
        ratios.append(speed_decrease_ratio(rho, v_r, v_hat))
    if not ratios:
        raise InsufficientDataError(f"no upstream sensor has data at step {t.index}")
    return float(np.mean(ratios))


def prediction_step_for(incident: Incident, epoch: datetime) -> TimeStep:
    """The step at whose stamp prediction happens: first bin boundary at or after the report."""
    return step_at_or_after(incident.first_report_time, epoch)


def build_traffic_features(
    profile: HistoricalProfile,
    series: Mapping[str, SensorSpeedSeries],
    upstream: Sequence[SensorMeta],
    prediction_step: TimeStep,
) -> TrafficFeatures:
    """Pre-incident relative speed and the decrease ratio at the prediction step."""
    rho = pre_incident_relative_speed(profile, series, upstream, prediction_step)
    delta = overall_speed_decrease_ratio(profile, series, upstream, rho, prediction_step)
    return TrafficFeatures(pre_incident_relative_speed=rho, initial_decrease_ratio=delta)


def label_ground_truth(
    profile: HistoricalProfile,
    series: Mapping[str, SensorSpeedSeries],
    upstream: Sequence[SensorMeta],
    prediction_step: TimeStep,
    horizon_minutes: int,
    thresholds: ClassThresholds = DEFAULT_THRESHOLDS,
) -> ImpactClass:
    """Ground-truth impact class at prediction_step + horizon."""
    rho = pre_incident_relative_speed(profile, series, upstream, prediction_step)
    target = prediction_step.plus_minutes(horizon_minutes)
    delta = overall_speed_decrease_ratio(profile, series, upstream, rho, target)
    return impact_class_from_ratio(delta, thresholds)
