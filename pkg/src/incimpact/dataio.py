"""File ingestion and emission: speed CSVs, incident logs, glossaries.

Speed data is a wide CSV (timestamp rows, one column per sensor) plus a
sensor-metadata CSV; incidents are a simple structured text of header fields
followed by indented, time-stamped log lines. Converters from raw source
formats are the caller's responsibility.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from .errors import FormatError, ParseError
from .extraction import Glossary
from .model import Direction, Incident, LogLine, STEP_SECONDS
from .traffic import SensorMeta, SensorSpeedSeries

log = logging.getLogger(__name__)

MIN_USABLE_MILEPOST = 2.0  # incidents below this have no measurable upstream stretch

_TS_FORMATS = ("%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S")


def parse_timestamp(text: str, path: Path, line_no: int) -> datetime:
    text = text.strip()
    for fmt in _TS_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ParseError(f"{path}:{line_no}: bad timestamp {text!r}")


def format_timestamp(ts: datetime) -> str:
    return ts.strftime("%Y-%m-%d %H:%M:%S")


@dataclass(frozen=True)
class SpeedDataset:
    """Everything loaded from one speed-data pair: epoch, metadata, series."""

    epoch: datetime  # midnight at or before the earliest record
    sensors: Dict[str, SensorMeta]
    series: Dict[str, SensorSpeedSeries]

    @property
    def start(self) -> datetime:
        first = min(min(s.readings) for s in self.series.values() if s.readings)
        return self.epoch + timedelta(seconds=first * STEP_SECONDS)

    @property
    def end(self) -> datetime:
        last = max(max(s.readings) for s in self.series.values() if s.readings)
        return self.epoch + timedelta(seconds=(last + 1) * STEP_SECONDS)


def load_sensor_metadata(path: Path) -> Dict[str, SensorMeta]:
    path = Path(path)
    sensors: Dict[str, SensorMeta] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["sensor_id", "roadway_id", "direction", "milepost"]
        if header is None or [h.strip() for h in header] != expected:
            raise ParseError(f"{path}:1: expected header {','.join(expected)}")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise ParseError(f"{path}:{line_no}: expected 4 columns, got {len(row)}")
            sensor_id = row[0].strip()
            if sensor_id in sensors:
                raise ParseError(f"{path}:{line_no}: duplicate sensor id {sensor_id!r}")
            try:
                milepost = float(row[3])
            except ValueError:
                raise ParseError(f"{path}:{line_no}: bad milepost {row[3]!r}") from None
            sensors[sensor_id] = SensorMeta(
                sensor_id=sensor_id,
                roadway_id=row[1].strip(),
                direction=Direction.from_code(row[2]),
                milepost=milepost,
            )
    if not sensors:
        raise ParseError(f"{path}: no sensors defined")
    return sensors


def load_speed_data(speed_path: Path, sensors_path: Path) -> SpeedDataset:
    """Parse the sensor-metadata CSV and the wide speed CSV.

    Timestamps must be strictly increasing at an exact 5-minute cadence;
    blank cells are gaps, never zeros.
    """
    speed_path, sensors_path = Path(speed_path), Path(sensors_path)
    sensors = load_sensor_metadata(sensors_path)
    readings: Dict[str, Dict[int, float]] = {}
    with open(speed_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "timestamp":
            raise ParseError(f"{speed_path}:1: first column must be 'timestamp'")
        sensor_ids = [h.strip() for h in header[1:]]
        for sid in sensor_ids:
            if sid not in sensors:
                raise ParseError(f"{speed_path}:1: sensor {sid!r} missing from metadata")
            readings[sid] = {}
        previous: datetime | None = None
        epoch: datetime | None = None
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(sensor_ids) + 1:
                raise ParseError(
                    f"{speed_path}:{line_no}: expected {len(sensor_ids) + 1} columns, "
                    f"got {len(row)}"
                )
            ts = parse_timestamp(row[0], speed_path, line_no)
            if previous is not None:
                if ts == previous:
                    raise FormatError(f"{speed_path}:{line_no}: duplicated timestamp {row[0]}")
                if ts < previous:
                    raise FormatError(f"{speed_path}:{line_no}: timestamps not increasing")
                if (ts - previous).total_seconds() != STEP_SECONDS:
                    raise FormatError(
                        f"{speed_path}:{line_no}: cadence violation, "
                        f"{row[0]} does not follow {format_timestamp(previous)} by 5 minutes"
                    )
            else:
                epoch = ts.replace(hour=0, minute=0, second=0, microsecond=0)
                if (ts - epoch).total_seconds() % STEP_SECONDS != 0:
                    raise FormatError(
                        f"{speed_path}:{line_no}: timestamps must sit on 5-minute boundaries"
                    )
            index = int((ts - epoch).total_seconds()) // STEP_SECONDS
            for sid, cell in zip(sensor_ids, row[1:]):
                cell = cell.strip()
                if not cell:
                    continue  # gap
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{speed_path}:{line_no}: bad speed {cell!r} for sensor {sid}"
                    ) from None
                if not math.isfinite(value) or value < 0:
                    raise ParseError(
                        f"{speed_path}:{line_no}: speed must be finite and >= 0, got {cell}"
                    )
                readings[sid][index] = value
            previous = ts
    if previous is None or epoch is None:
        raise ParseError(f"{speed_path}: no data rows")
    series = {
        sid: SensorSpeedSeries(meta=sensors[sid], readings=vals)
        for sid, vals in readings.items()
    }
    return SpeedDataset(epoch=epoch, sensors=sensors, series=series)


# --- incidents ------------------------------------------------------------------

_HEADER_FIELDS = ("incident", "reported", "roadway", "direction", "milepost")


def load_incidents(path: Path) -> Tuple[List[Incident], int]:
    """Parse the structured incident text.

    Returns (incidents, dropped) where dropped counts incidents excluded for
    lying within the first 2 miles of their roadway. Out-of-order log lines
    are re-sorted with a warning.
    """
    path = Path(path)
    incidents: List[Incident] = []
    dropped = 0
    fields: Dict[str, str] = {}
    lines: List[Tuple[datetime, str]] = []
    start_line = 0

    def flush(at_line: int) -> None:
        nonlocal dropped, fields, lines
        if not fields and not lines:
            return
        missing = [f for f in _HEADER_FIELDS if f not in fields]
        if missing:
            raise ParseError(
                f"{path}:{start_line}: incident record missing field(s) {', '.join(missing)}"
            )
        if sorted(lines, key=lambda item: item[0]) != lines:
            log.warning(
                "%s:%s: incident %s has out-of-order log lines; re-sorting",
                path, start_line, fields["incident"],
            )
            lines = sorted(lines, key=lambda item: item[0])
        try:
            milepost = float(fields["milepost"])
        except ValueError:
            raise ParseError(
                f"{path}:{start_line}: bad milepost {fields['milepost']!r}"
            ) from None
        incident = Incident(
            id=fields["incident"],
            first_report_time=parse_timestamp(fields["reported"], path, start_line),
            roadway_id=fields["roadway"],
            direction=Direction.from_code(fields["direction"]),
            milepost=milepost,
            log_lines=tuple(LogLine(timestamp=ts, text=text) for ts, text in lines),
        )
        if incident.milepost < MIN_USABLE_MILEPOST:
            dropped += 1
        else:
            incidents.append(incident)
        fields, lines = {}, []

    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush(line_no)
                continue
            if line.startswith((" ", "\t")):
                stamp, sep, text = line.strip().partition(" | ")
                if not sep:
                    raise ParseError(f"{path}:{line_no}: log line needs 'timestamp | text'")
                lines.append((parse_timestamp(stamp, path, line_no), text))
                continue
            key, sep, value = line.partition(":")
            if not sep:
                raise ParseError(f"{path}:{line_no}: expected 'key: value', got {line!r}")
            key = key.strip().lower()
            if key not in _HEADER_FIELDS:
                raise ParseError(f"{path}:{line_no}: unknown header field {key!r}")
            if key == "incident" and fields:
                flush(line_no)
            if not fields:
                start_line = line_no
            fields[key] = value.strip()
        flush(line_no if "line_no" in locals() else 0)
    if dropped:
        log.info("%s: excluded %d incident(s) below milepost %.1f", path, dropped, MIN_USABLE_MILEPOST)
    return incidents, dropped


def load_glossary(path: Path) -> Glossary:
    """Two-column TSV, ``key<TAB>expansion``; '#' comment lines are ignored."""
    path = Path(path)
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{line_no}: expected 'key<TAB>expansion'")
            pairs.append((parts[0], parts[1]))
    return Glossary.from_pairs(pairs)


def chronological_split(
    incidents: Sequence[Incident], fraction: float
) -> Tuple[List[Incident], List[Incident]]:
    """Earliest floor(fraction * N) incidents become the training set.

    Ordered by first report time, ties broken by incident id.
    """
    if not (0.0 < fraction < 1.0):
        raise ParseError(f"split fraction must be in (0, 1), got {fraction}")
    ordered = sorted(incidents, key=lambda i: (i.first_report_time, i.id))
    cut = int(math.floor(fraction * len(ordered) + 1e-9))
    return ordered[:cut], ordered[cut:]


# --- writers (used by the synthetic generator) -----------------------------------

def write_sensor_metadata(sensors: Sequence[SensorMeta], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sensor_id", "roadway_id", "direction", "milepost"])
        for s in sensors:
            writer.writerow([s.sensor_id, s.roadway_id, s.direction.value, f"{s.milepost:.3f}"])


def write_speed_csv(
    series: Sequence[SensorSpeedSeries], epoch: datetime, path: Path
) -> None:
    """Wide CSV over the union of step indices; missing readings become blanks."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    all_steps = sorted({i for s in series for i in s.readings})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp"] + [s.meta.sensor_id for s in series])
        for index in all_steps:
            stamp = epoch + timedelta(seconds=index * STEP_SECONDS)
            row = [format_timestamp(stamp)]
            for s in series:
                value = s.readings.get(index)
                row.append("" if value is None else f"{value:.2f}")
            writer.writerow(row)


def write_incidents(incidents: Sequence[Incident], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = []
    for inc in incidents:
        lines = [
            f"incident: {inc.id}",
            f"reported: {format_timestamp(inc.first_report_time)}",
            f"roadway: {inc.roadway_id}",
            f"direction: {inc.direction.value}",
            f"milepost: {inc.milepost:.3f}",
        ]
        for entry in inc.log_lines:
            lines.append(f"  {format_timestamp(entry.timestamp)} | {entry.text}")
        blocks.append("\n".join(lines))
    path.write_text("\n\n".join(blocks) + "\n", encoding="utf-8")


def write_glossary(glossary: Glossary, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# abbreviation glossary"]
    for key, expansion in glossary.entries.items():
        lines.append(f"{key}\t{expansion}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
