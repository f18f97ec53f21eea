"""Core domain types: impact classes, 5-minute time steps, incidents, and feature records.

Everything here is an immutable value object, safe to share across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, time, timedelta
from enum import Enum, IntEnum
from typing import Mapping, Optional, Tuple

from .errors import InvalidInputError

STEP_MINUTES = 5
STEP_SECONDS = STEP_MINUTES * 60
STEPS_PER_DAY = 24 * 60 // STEP_MINUTES  # 288 slots per day


class ImpactClass(IntEnum):
    """Severity of an incident's effect on upstream traffic, ordered MILD < MODERATE < SEVERE."""

    MILD = 0
    MODERATE = 1
    SEVERE = 2

    @property
    def word(self) -> str:
        """Lower-case single word used in prompts and model responses."""
        return self.name.lower()

    @classmethod
    def from_word(cls, word: str) -> "ImpactClass":
        try:
            return cls[word.strip().upper()]
        except KeyError:
            raise InvalidInputError(f"unknown impact class {word!r}") from None

    @property
    def neighbors(self) -> Tuple["ImpactClass", ...]:
        """Adjacent classes in severity order; MODERATE has two, the extremes have one."""
        if self is ImpactClass.MODERATE:
            return (ImpactClass.MILD, ImpactClass.SEVERE)
        return (ImpactClass.MODERATE,)


CLASSES: Tuple[ImpactClass, ...] = (
    ImpactClass.MILD,
    ImpactClass.MODERATE,
    ImpactClass.SEVERE,
)


@dataclass(frozen=True)
class ClassThresholds:
    """Boundaries on the overall speed decrease ratio separating the three classes.

    The intervals are half open: mild is [0, mild_max], moderate is
    (mild_max, moderate_max], severe is (moderate_max, inf).
    """

    mild_max: float = 0.2
    moderate_max: float = 0.5

    def __post_init__(self) -> None:
        if not (0.0 < self.mild_max < self.moderate_max):
            raise InvalidInputError(
                f"thresholds must satisfy 0 < mild_max < moderate_max, "
                f"got {self.mild_max} and {self.moderate_max}"
            )


DEFAULT_THRESHOLDS = ClassThresholds()


def impact_class_from_ratio(
    delta: float, thresholds: ClassThresholds = DEFAULT_THRESHOLDS
) -> ImpactClass:
    """Map a non-negative overall speed decrease ratio to an impact class.

    Raises:
        InvalidInputError: if delta is negative or non-finite.
    """
    if not math.isfinite(delta) or delta < 0:
        raise InvalidInputError(f"decrease ratio must be finite and >= 0, got {delta!r}")
    if delta <= thresholds.mild_max:
        return ImpactClass.MILD
    if delta <= thresholds.moderate_max:
        return ImpactClass.MODERATE
    return ImpactClass.SEVERE


@dataclass(frozen=True, order=True)
class TimeStep:
    """A 5-minute bin, counted from a dataset epoch (the first midnight of the data)."""

    index: int

    @property
    def slot_of_day(self) -> int:
        """Time-of-day slot in [0, 287]; valid when the epoch is midnight-aligned."""
        return self.index % STEPS_PER_DAY

    def plus_minutes(self, minutes: int) -> "TimeStep":
        if minutes % STEP_MINUTES != 0:
            raise InvalidInputError(f"minutes must be a multiple of {STEP_MINUTES}, got {minutes}")
        return TimeStep(self.index + minutes // STEP_MINUTES)


def step_at_or_after(ts: datetime, epoch: datetime) -> TimeStep:
    """The step whose stamp is the first 5-minute boundary at or after ts.

    A measurement stamped on that boundary summarizes the preceding five
    minutes, so this is the step at whose end a just-reported incident is
    first assessed (a report at 8:08 maps to the 8:10 stamp).
    """
    delta = ts - epoch
    micros = (delta.days * 86_400 + delta.seconds) * 1_000_000 + delta.microseconds
    step_micros = STEP_SECONDS * 1_000_000
    return TimeStep(-(-micros // step_micros))


def step_containing(ts: datetime, epoch: datetime) -> TimeStep:
    """The step whose stamp is the last 5-minute boundary at or before ts."""
    delta = ts - epoch
    micros = (delta.days * 86_400 + delta.seconds) * 1_000_000 + delta.microseconds
    return TimeStep(micros // (STEP_SECONDS * 1_000_000))


def step_time(step: TimeStep, epoch: datetime) -> datetime:
    """Wall-clock stamp of a step."""
    return epoch + timedelta(seconds=step.index * STEP_SECONDS)


def minutes_of_day(t: time) -> int:
    return t.hour * 60 + t.minute


class Direction(Enum):
    """Travel direction of a roadway; mileposts grow northbound and eastbound."""

    NORTH = "N"
    SOUTH = "S"
    EAST = "E"
    WEST = "W"

    @property
    def milepost_increasing(self) -> bool:
        return self in (Direction.NORTH, Direction.EAST)

    @classmethod
    def from_code(cls, code: str) -> "Direction":
        try:
            return cls(code.strip().upper())
        except ValueError:
            raise InvalidInputError(f"unknown direction {code!r}") from None


@dataclass(frozen=True)
class LogLine:
    """One time-stamped free-text message from an incident log."""

    timestamp: datetime
    text: str


@dataclass(frozen=True)
class Incident:
    """A reported roadway incident with its raw log.

    log_lines must already be sorted ascending by timestamp; loaders re-sort
    out-of-order input before constructing an Incident.
    """

    id: str
    first_report_time: datetime
    roadway_id: str
    direction: Direction
    milepost: float
    log_lines: Tuple[LogLine, ...] = ()

    def __post_init__(self) -> None:
        stamps = [line.timestamp for line in self.log_lines]
        if any(a > b for a, b in zip(stamps, stamps[1:])):
            raise InvalidInputError(f"incident {self.id}: log lines not sorted by timestamp")


@dataclass(frozen=True)
class IncidentFeatures:
    """Attributes extracted from an incident log plus the structured report time."""

    incident_time: time
    num_vehicles: int
    num_lanes_blocked: int
    extended: Optional[Mapping[str, object]] = None

    def __post_init__(self) -> None:
        if self.num_vehicles < 0 or self.num_lanes_blocked < 0:
            raise InvalidInputError("vehicle and lane counts must be non-negative")


@dataclass(frozen=True)
class TrafficFeatures:
    """Speed-derived features of one incident at its prediction step."""

    pre_incident_relative_speed: float  # mph, negative when slower than normal
    initial_decrease_ratio: float  # dimensionless, >= 0

    def __post_init__(self) -> None:
        if self.initial_decrease_ratio < 0:
            raise InvalidInputError("initial decrease ratio must be >= 0")


@dataclass(frozen=True)
class FeatureVector:
    """The five features used for prediction; nothing else enters distances or prompts."""

    incident_time: time
    num_vehicles: int
    num_lanes_blocked: int
    pre_incident_relative_speed: float
    initial_decrease_ratio: float

    @classmethod
    def combine(cls, incident: IncidentFeatures, traffic: TrafficFeatures) -> "FeatureVector":
        return cls(
            incident_time=incident.incident_time,
            num_vehicles=incident.num_vehicles,
            num_lanes_blocked=incident.num_lanes_blocked,
            pre_incident_relative_speed=traffic.pre_incident_relative_speed,
            initial_decrease_ratio=traffic.initial_decrease_ratio,
        )


@dataclass(frozen=True)
class LabeledExample:
    """A feature vector with its ground-truth class at one horizon."""

    feature_vector: FeatureVector
    horizon_minutes: int
    truth: ImpactClass
    incident_id: str

    def __post_init__(self) -> None:
        if self.horizon_minutes <= 0 or self.horizon_minutes % STEP_MINUTES != 0:
            raise InvalidInputError(
                f"horizon must be a positive multiple of {STEP_MINUTES} minutes, "
                f"got {self.horizon_minutes}"
            )


@dataclass(frozen=True)
class PredictionTask:
    """One prediction to make: an incident, its prediction step, and a horizon."""

    incident_id: str
    prediction_step: TimeStep
    horizon_minutes: int

    @property
    def target_step(self) -> TimeStep:
        return self.prediction_step.plus_minutes(self.horizon_minutes)
