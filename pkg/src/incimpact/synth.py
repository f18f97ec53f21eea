"""Synthetic corridor generator: diurnal speed fields with injected incidents.

Each incident's upstream slowdown is constructed so the labeling computation
reproduces a designed impact class at every horizon, and its log text is
emitted in phrasings the rule extractor recovers exactly. A truth manifest
records every designed value for round-trip verification.

Injected windows also shift the slot-of-day means they are averaged into, so
the injection runs a few fixed-point passes against the evolving profile and
then verifies every realized ratio against its design before returning.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .dataio import (
    format_timestamp,
    write_glossary,
    write_incidents,
    write_sensor_metadata,
    write_speed_csv,
)
from .extraction import Glossary
from .model import (
    CLASSES,
    ClassThresholds,
    DEFAULT_THRESHOLDS,
    Direction,
    ImpactClass,
    Incident,
    LogLine,
    STEPS_PER_DAY,
    STEP_SECONDS,
    step_at_or_after,
)
from .traffic import SensorMeta, SensorSpeedSeries

PRE_STEPS = 3  # pinned pre-incident steps feeding the rho computation
_INJECTION_PASSES = 3
_MAX_SENSOR_DEPTH = 0.95
_VERIFY_TOLERANCE = 0.01

DEFAULT_GLOSSARY_PAIRS: Tuple[Tuple[str, str], ...] = (
    ("TC", "traffic collision"),
    ("veh", "vehicle"),
    ("vehs", "vehicles"),
    ("enrt", "en route"),
    ("1141", "ambulance requested"),
    ("1185", "tow truck requested"),
    ("RHS", "right-hand shoulder"),
    ("LHS", "left-hand shoulder"),
    ("NB", "northbound"),
    ("SB", "southbound"),
    ("EB", "eastbound"),
    ("WB", "westbound"),
    ("FSP", "freeway service patrol"),
)


@dataclass(frozen=True)
class ClassBands:
    """Per-class value ranges for the designed drops and counts."""

    target_delta: Mapping[ImpactClass, Tuple[float, float]]
    initial_delta: Mapping[ImpactClass, Tuple[float, float]]
    vehicles: Mapping[ImpactClass, Tuple[int, int]]
    lanes: Mapping[ImpactClass, Tuple[int, int]]


DEFAULT_BANDS = ClassBands(
    target_delta={
        ImpactClass.MILD: (0.0, 0.12),
        ImpactClass.MODERATE: (0.27, 0.43),
        ImpactClass.SEVERE: (0.57, 0.78),
    },
    initial_delta={
        ImpactClass.MILD: (0.0, 0.08),
        ImpactClass.MODERATE: (0.12, 0.24),
        ImpactClass.SEVERE: (0.30, 0.50),
    },
    vehicles={
        ImpactClass.MILD: (1, 2),
        ImpactClass.MODERATE: (2, 4),
        ImpactClass.SEVERE: (3, 6),
    },
    lanes={
        ImpactClass.MILD: (0, 1),
        ImpactClass.MODERATE: (1, 2),
        ImpactClass.SEVERE: (2, 4),
    },
)


@dataclass(frozen=True)
class SynthConfig:
    """Shape of the generated corridor and its incident population."""

    corridor_miles: float = 16.0
    sensor_spacing_miles: float = 0.4
    days: int = 28
    incident_count: int = 500
    class_mix: Tuple[float, float, float] = (0.896, 0.083, 0.021)
    horizons: Tuple[int, ...] = (15, 30)
    horizon_drift: float = 0.0  # probability the later-horizon class moves to a neighbor
    noise_sigma: float = 1.0
    rho_range: Tuple[float, float] = (-8.0, 2.0)
    span_miles: float = 2.0
    extent_miles: float = 2.0
    decay_steps: int = 4
    bands: ClassBands = DEFAULT_BANDS
    thresholds: ClassThresholds = DEFAULT_THRESHOLDS
    roadway_id: str = "SR-101"
    direction: Direction = Direction.EAST
    start_date: datetime = datetime(2017, 1, 2)
    report_window: Tuple[int, int] = (2 * 60, 21 * 60)  # minutes of day
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.sensor_spacing_miles <= 0:
            raise ConfigError("sensor spacing must be positive")
        if self.corridor_miles < self.span_miles + 2.0:
            raise ConfigError("corridor too short for an upstream span plus usable mileposts")
        if not (0.0 <= self.horizon_drift <= 1.0):
            raise ConfigError("horizon_drift must be in [0, 1]")
        if abs(sum(self.class_mix) - 1.0) > 1e-9 or any(p < 0 for p in self.class_mix):
            raise ConfigError("class_mix must be non-negative and sum to 1")
        coverage = min(self.extent_miles, self.span_miles) / self.span_miles
        max_depth = 0.0
        for cls in CLASSES:
            for band in (self.bands.target_delta[cls], self.bands.initial_delta[cls]):
                lo, hi = band
                if not (0.0 <= lo <= hi):
                    raise ConfigError(f"bad delta band for {cls.word}: ({lo}, {hi})")
                max_depth = max(max_depth, hi / max(coverage, 1e-9))
            for endpoint in self.bands.target_delta[cls]:
                if endpoint > 0 and _class_of(endpoint, self.thresholds) is not cls:
                    raise ConfigError(
                        f"infeasible class target: the {cls.word} band endpoint {endpoint} "
                        f"labels as {_class_of(endpoint, self.thresholds).word}"
                    )
        if max_depth > _MAX_SENSOR_DEPTH:
            raise ConfigError(
                f"infeasible class target: per-sensor drop {max_depth:.2f} exceeds "
                f"{_MAX_SENSOR_DEPTH} at coverage {coverage:.2f}"
            )
        if _min_base_speed() * (1.0 - max_depth) + self.rho_range[0] < 0:
            raise ConfigError("injected drops would push speeds below zero")


def _class_of(delta: float, thresholds: ClassThresholds) -> ImpactClass:
    if delta <= thresholds.mild_max:
        return ImpactClass.MILD
    if delta <= thresholds.moderate_max:
        return ImpactClass.MODERATE
    return ImpactClass.SEVERE


def base_speed(slot_of_day: int) -> float:
    """Smooth diurnal profile: free flow with morning and evening rush dips."""
    minutes = slot_of_day * 5 + 2.5
    morning = 17.0 * _bump(minutes, center=7.75 * 60, width=85.0)
    evening = 20.0 * _bump(minutes, center=17.25 * 60, width=105.0)
    return 65.0 - morning - evening


def _bump(x: float, center: float, width: float) -> float:
    u = (x - center) / width
    return math.exp(-0.5 * u * u)


def _min_base_speed() -> float:
    return min(base_speed(s) for s in range(STEPS_PER_DAY))


@dataclass(frozen=True)
class DesignedIncident:
    """Ground truth of one synthetic incident, as designed at generation time."""

    incident_id: str
    report_time: datetime
    milepost: float
    prediction_index: int
    rho: float
    initial_delta: float
    target_delta: Dict[int, float]  # horizon -> designed overall decrease ratio
    impact_class: Dict[int, ImpactClass]  # horizon -> designed class
    num_vehicles: int
    num_lanes_blocked: int
    large_truck: bool
    ambulance_or_tow: bool
    adverse_weather: bool


@dataclass(frozen=True)
class _Placement:
    """Where and how one incident's slowdown is written into the speed array."""

    prediction_index: int
    span_idx: np.ndarray
    affected_idx: np.ndarray
    rho: float
    schedule: Dict[int, float]  # step -> per-sensor depth on affected sensors


@dataclass
class SynthDataset:
    """In-memory result of one generation."""

    config: SynthConfig
    epoch: datetime
    sensors: List[SensorMeta]
    series: Dict[str, SensorSpeedSeries]
    incidents: List[Incident]
    designed: List[DesignedIncident]
    glossary: Glossary


def _apportion(mix: Sequence[float], total: int) -> List[int]:
    """Largest-remainder apportionment of total into len(mix) integer counts."""
    raw = [p * total for p in mix]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(mix)), key=lambda i: (raw[i] - counts[i], -i), reverse=True)
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def generate(config: SynthConfig) -> SynthDataset:
    """Build the full synthetic dataset in memory."""
    rng = np.random.default_rng([config.rng_seed, 0])
    n_sensors = int(round(config.corridor_miles / config.sensor_spacing_miles)) + 1
    sensors = [
        SensorMeta(
            sensor_id=f"s{i:03d}",
            roadway_id=config.roadway_id,
            direction=config.direction,
            milepost=round(i * config.sensor_spacing_miles, 3),
        )
        for i in range(n_sensors)
    ]
    mileposts = np.array([s.milepost for s in sensors])

    n_steps = config.days * STEPS_PER_DAY
    slots = np.arange(n_steps) % STEPS_PER_DAY
    base_by_slot = np.array([base_speed(s) for s in range(STEPS_PER_DAY)])
    speeds = base_by_slot[slots][:, None] + rng.normal(
        0.0, config.noise_sigma, size=(n_steps, n_sensors)
    )
    speeds = np.maximum(speeds, 0.5)

    epoch = config.start_date.replace(hour=0, minute=0, second=0, microsecond=0)
    classes_15 = _assign_classes(config, rng)
    designed: List[DesignedIncident] = []
    placements: List[_Placement] = []
    incidents: List[Incident] = []
    occupied: set = set()

    for n, cls15 in enumerate(classes_15):
        placed = _place_incident(config, rng, mileposts, occupied, n_steps)
        if placed is None:
            raise ConfigError(
                "could not place all incidents without overlapping slowdowns; "
                "increase days or corridor length, or reduce incident_count"
            )
        report_minute, milepost, span_idx, affected_idx = placed
        incident_id = f"inc-{n:04d}"
        report_time = epoch + timedelta(minutes=report_minute)
        j = step_at_or_after(report_time, epoch).index

        cls_by_horizon: Dict[int, ImpactClass] = {}
        current = cls15
        for horizon in sorted(config.horizons):
            if cls_by_horizon and config.horizon_drift > 0 and rng.random() < config.horizon_drift:
                neighbors = current.neighbors
                current = neighbors[int(rng.integers(0, len(neighbors)))]
            cls_by_horizon[horizon] = current

        coverage = len(affected_idx) / len(span_idx)
        rho = float(rng.uniform(*config.rho_range))
        lo, hi = config.bands.initial_delta[cls15]
        initial_delta = float(rng.uniform(lo, hi))
        target_delta = {}
        for horizon in config.horizons:
            lo, hi = config.bands.target_delta[cls_by_horizon[horizon]]
            target_delta[horizon] = float(rng.uniform(lo, hi))

        schedule = _depth_schedule(j, initial_delta, target_delta, coverage, config)
        if max(schedule.values()) > _MAX_SENSOR_DEPTH:
            raise ConfigError(
                f"incident {incident_id}: per-sensor depth {max(schedule.values()):.2f} "
                f"exceeds {_MAX_SENSOR_DEPTH}"
            )
        placements.append(
            _Placement(
                prediction_index=j,
                span_idx=span_idx,
                affected_idx=affected_idx,
                rho=rho,
                schedule=schedule,
            )
        )
        occupied.update(
            (s, t)
            for s in span_idx
            for t in range(j - PRE_STEPS, max(schedule) + 1)
        )

        vehicles = int(rng.integers(*_inclusive(config.bands.vehicles[cls15])))
        lanes = int(rng.integers(*_inclusive(config.bands.lanes[cls15])))
        design = DesignedIncident(
            incident_id=incident_id,
            report_time=report_time,
            milepost=float(milepost),
            prediction_index=j,
            rho=rho,
            initial_delta=initial_delta,
            target_delta=target_delta,
            impact_class=cls_by_horizon,
            num_vehicles=vehicles,
            num_lanes_blocked=lanes,
            large_truck=bool(rng.random() < 0.15),
            ambulance_or_tow=bool(rng.random() < (0.1 + 0.25 * int(cls15))),
            adverse_weather=bool(rng.random() < 0.10),
        )
        designed.append(design)
        incidents.append(_render_incident(design, config, epoch, rng))

    _apply_placements(speeds, placements, config.days, n_sensors)
    _verify_designs(speeds, placements, designed, config)

    series = {
        meta.sensor_id: SensorSpeedSeries(
            meta=meta, readings={t: float(speeds[t, i]) for t in range(n_steps)}
        )
        for i, meta in enumerate(sensors)
    }
    return SynthDataset(
        config=config,
        epoch=epoch,
        sensors=sensors,
        series=series,
        incidents=incidents,
        designed=designed,
        glossary=Glossary.from_pairs(DEFAULT_GLOSSARY_PAIRS),
    )


def _inclusive(bounds: Tuple[int, int]) -> Tuple[int, int]:
    return bounds[0], bounds[1] + 1


def _assign_classes(config: SynthConfig, rng: np.random.Generator) -> List[ImpactClass]:
    counts = _apportion(config.class_mix, config.incident_count)
    classes = [cls for cls, count in zip(CLASSES, counts) for _ in range(count)]
    order = rng.permutation(len(classes))
    return [classes[i] for i in order]


def _place_incident(
    config: SynthConfig,
    rng: np.random.Generator,
    mileposts: np.ndarray,
    occupied: set,
    n_steps: int,
) -> Optional[Tuple[int, float, np.ndarray, np.ndarray]]:
    """Find a (time, milepost) whose slowdown window touches no occupied cell."""
    window_fwd = max(config.horizons) // 5 + config.decay_steps
    lo_min, hi_min = config.report_window
    for _ in range(2000):
        day = int(rng.integers(0, config.days))
        minute = int(rng.integers(lo_min, hi_min))
        report_minute = day * 24 * 60 + minute
        j = -(-report_minute // 5)  # ceil to the closing bin boundary
        if j - PRE_STEPS < day * STEPS_PER_DAY:
            continue
        if j + window_fwd >= min((day + 1) * STEPS_PER_DAY, n_steps):
            continue
        milepost = float(np.round(rng.uniform(config.span_miles, float(mileposts.max())), 3))
        lo, hi = milepost - config.span_miles, milepost
        span_idx = np.flatnonzero((mileposts >= lo) & (mileposts <= hi))
        if span_idx.size == 0:
            continue
        ext_lo = milepost - min(config.extent_miles, config.span_miles)
        affected_idx = np.flatnonzero((mileposts >= ext_lo) & (mileposts <= hi))
        cells = {(s, t) for s in span_idx for t in range(j - PRE_STEPS, j + window_fwd + 1)}
        if cells & occupied:
            continue
        return report_minute, milepost, span_idx, affected_idx
    return None


def _depth_schedule(
    j: int,
    initial_delta: float,
    target_delta: Mapping[int, float],
    coverage: float,
    config: SynthConfig,
) -> Dict[int, float]:
    """Per-step drop depth for affected sensors, linear between designed anchors."""
    anchors = [(j, initial_delta / coverage)]
    for horizon in sorted(target_delta):
        anchors.append((j + horizon // 5, target_delta[horizon] / coverage))
    schedule: Dict[int, float] = {}
    for (t0, d0), (t1, d1) in zip(anchors, anchors[1:]):
        for t in range(t0, t1):
            schedule[t] = d0 + (t - t0) / (t1 - t0) * (d1 - d0)
    last_step, last_depth = anchors[-1]
    schedule[last_step] = last_depth
    for k in range(1, config.decay_steps + 1):
        schedule[last_step + k] = last_depth * (1.0 - k / (config.decay_steps + 1))
    return schedule


def _slot_means(speeds: np.ndarray, days: int, n_sensors: int) -> np.ndarray:
    return speeds.reshape(days, STEPS_PER_DAY, n_sensors).mean(axis=0)


def _apply_placements(
    speeds: np.ndarray, placements: Sequence[_Placement], days: int, n_sensors: int
) -> None:
    """Write designed speeds, iterating to a fixed point with the slot means.

    Injected cells feed the slot-of-day means they are later judged against,
    so each pass re-derives the means and rewrites the windows; the coupling
    is O(1/days) per pass and three passes push the residual far below any
    class-band margin.
    """
    for _ in range(_INJECTION_PASSES):
        means = _slot_means(speeds, days, n_sensors)
        for p in placements:
            j = p.prediction_index
            for t in range(j - PRE_STEPS, j):
                slot = t % STEPS_PER_DAY
                speeds[t, p.span_idx] = means[slot, p.span_idx] + p.rho
            for t, depth in p.schedule.items():
                slot = t % STEPS_PER_DAY
                speeds[t, p.span_idx] = means[slot, p.span_idx] + p.rho
                speeds[t, p.affected_idx] = (
                    means[slot, p.affected_idx] * (1.0 - depth) + p.rho
                )
    if (speeds < 0).any():
        raise ConfigError("injected drops produced negative speeds; widen rho_range or bands")


def _verify_designs(
    speeds: np.ndarray,
    placements: Sequence[_Placement],
    designed: Sequence[DesignedIncident],
    config: SynthConfig,
) -> None:
    """Check every realized ratio against its design before handing data out."""
    days = config.days
    n_sensors = speeds.shape[1]
    means = _slot_means(speeds, days, n_sensors)
    for p, d in zip(placements, designed):
        j = p.prediction_index
        pre = [
            speeds[t, s] - means[t % STEPS_PER_DAY, s]
            for t in range(j - PRE_STEPS, j)
            for s in p.span_idx
        ]
        rho = float(np.mean(pre))

        def overall(t: int) -> float:
            ratios = [
                max(
                    (rho - (speeds[t, s] - means[t % STEPS_PER_DAY, s]))
                    / means[t % STEPS_PER_DAY, s],
                    0.0,
                )
                for s in p.span_idx
            ]
            return float(np.mean(ratios))

        checks = [
            (rho, d.rho, 0.5),
            (overall(j), d.initial_delta, _VERIFY_TOLERANCE),
        ]
        for horizon, target in sorted(d.target_delta.items()):
            checks.append((overall(j + horizon // 5), target, _VERIFY_TOLERANCE))
        for got, want, tol in checks:
            if abs(got - want) > tol:
                raise ConfigError(
                    f"incident {d.incident_id}: realized value {got:.4f} drifted from "
                    f"designed {want:.4f}; the corridor is too crowded for exact injection"
                )


_DIR_WORD = {
    Direction.NORTH: "NB",
    Direction.SOUTH: "SB",
    Direction.EAST: "EB",
    Direction.WEST: "WB",
}

_SPELLED = {1: "one", 2: "two", 3: "three", 4: "four", 5: "five", 6: "six"}


def _render_incident(
    design: DesignedIncident,
    config: SynthConfig,
    epoch: datetime,
    rng: np.random.Generator,
) -> Incident:
    """Emit CHP-style log lines consistent with the designed features.

    Everything the extractor must recover is stamped at the report time; a
    couple of post-cutoff lines deliberately contradict it so leakage tests
    have something to catch.
    """
    t0 = design.report_time
    dir_word = _DIR_WORD[config.direction]
    lines: List[LogLine] = [
        LogLine(t0, f"TC reported {dir_word} {config.roadway_id} at mp {design.milepost:.1f}")
    ]
    v = design.num_vehicles
    style = int(rng.integers(0, 3))
    if style == 0:
        veh_text = f"{v} vehs involved"
    elif style == 1 and v in _SPELLED:
        veh_text = f"{_SPELLED[v]} vehicles involved"
    else:
        veh_text = f"{v} veh TC"
    k = design.num_lanes_blocked
    if k == 0:
        lane_text = "vehs on RHS, no lanes blocked"
    elif int(rng.integers(0, 2)) == 0:
        hashes = " and ".join(f"#{i + 1}" for i in range(k))
        lane_text = f"{hashes} lane{'s' if k > 1 else ''} blocked"
    else:
        lane_text = f"{k} lane{'s' if k > 1 else ''} blocked"
    lines.append(LogLine(t0, f"{veh_text}, {lane_text}"))
    if design.large_truck:
        lines.append(LogLine(t0, "big rig involved"))
    if design.ambulance_or_tow:
        lines.append(LogLine(t0, "1141 enrt"))
    if design.adverse_weather:
        lines.append(LogLine(t0, "raining, roadway wet"))

    # Post-cutoff chatter that contradicts the designed counts.
    after = epoch + timedelta(seconds=design.prediction_index * STEP_SECONDS)
    lines.append(LogLine(after + timedelta(minutes=4), f"{v + 2} vehs involved now"))
    lines.append(LogLine(after + timedelta(minutes=9), "all lanes open, traffic recovering"))

    return Incident(
        id=design.incident_id,
        first_report_time=design.report_time,
        roadway_id=config.roadway_id,
        direction=config.direction,
        milepost=design.milepost,
        log_lines=tuple(lines),
    )


def truth_manifest_json(dataset: SynthDataset) -> str:
    rows = []
    for d in dataset.designed:
        rows.append(
            {
                "incident_id": d.incident_id,
                "report_time": format_timestamp(d.report_time),
                "milepost": d.milepost,
                "prediction_index": d.prediction_index,
                "rho": d.rho,
                "initial_delta": d.initial_delta,
                "target_delta": {str(h): v for h, v in sorted(d.target_delta.items())},
                "impact_class": {str(h): c.word for h, c in sorted(d.impact_class.items())},
                "num_vehicles": d.num_vehicles,
                "num_lanes_blocked": d.num_lanes_blocked,
                "large_truck": d.large_truck,
                "ambulance_or_tow": d.ambulance_or_tow,
                "adverse_weather": d.adverse_weather,
            }
        )
    payload = {
        "epoch": format_timestamp(dataset.epoch),
        "incident_count": len(rows),
        "incidents": rows,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def load_truth_manifest(path: Path) -> Dict[str, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return {row["incident_id"]: row for row in payload["incidents"]}


def synth_dataset(config: SynthConfig, out_dir: Path) -> Dict[str, Path]:
    """Generate and write the dataset files; returns the path of each artifact."""
    dataset = generate(config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "sensors": out_dir / "sensors.csv",
        "speed": out_dir / "speed.csv",
        "incidents": out_dir / "incidents.txt",
        "glossary": out_dir / "glossary.tsv",
        "truth": out_dir / "truth.json",
    }
    write_sensor_metadata(dataset.sensors, paths["sensors"])
    ordered = [dataset.series[s.sensor_id] for s in dataset.sensors]
    write_speed_csv(ordered, dataset.epoch, paths["speed"])
    write_incidents(dataset.incidents, paths["incidents"])
    write_glossary(dataset.glossary, paths["glossary"])
    paths["truth"].write_text(truth_manifest_json(dataset), encoding="utf-8")
    return paths
