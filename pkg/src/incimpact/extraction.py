"""Incident-log processing: glossary expansion, truncation, and feature extraction.

Two extraction routes produce the same IncidentFeatures shape: a rule-based
extractor that runs offline, and an LLM-backed extractor that prompts a
provider and parses a strict key-value response.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import datetime, time
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import EmptyLogError, ExtractionParseError, GlossaryError, ProviderError
from .model import Incident, IncidentFeatures, LogLine, TimeStep, step_time

EXTRACTION_SCHEMA_VERSION = "extract-v1"

DEFAULT_NUM_VEHICLES = 1  # an incident implies at least one vehicle
DEFAULT_NUM_LANES = 0  # unstated blockage most often means shoulder

_NUMBER_WORDS = {
    "no": 0, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10,
    "eleven": 11, "twelve": 12,
}


@dataclass(frozen=True)
class Glossary:
    """Abbreviation/code expansions applied to raw log lines before extraction."""

    entries: Mapping[str, str]

    def __post_init__(self) -> None:
        lowered = {k.lower(): v for k, v in self.entries.items()}
        object.__setattr__(self, "_lowered", lowered)
        if self.entries:
            # Longest key first so the longest match wins at any position.
            keys = sorted(self.entries, key=len, reverse=True)
            alternation = "|".join(re.escape(k) for k in keys)
            pattern = re.compile(rf"(?<!\w)(?:{alternation})(?!\w)", re.IGNORECASE)
        else:
            pattern = None
        object.__setattr__(self, "_pattern", pattern)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[str, str]]) -> "Glossary":
        """Build a glossary, rejecting duplicate keys with conflicting expansions."""
        entries: Dict[str, str] = {}
        lowered: Dict[str, str] = {}
        for key, expansion in pairs:
            key = key.strip()
            expansion = expansion.strip()
            if not key:
                raise GlossaryError("empty glossary key")
            prior = lowered.get(key.lower())
            if prior is not None and prior != expansion:
                raise GlossaryError(
                    f"glossary key {key!r} mapped to both {prior!r} and {expansion!r}"
                )
            lowered[key.lower()] = expansion
            entries[key] = expansion
        return cls(entries=entries)


def expand_glossary(raw_line: str, glossary: Glossary) -> str:
    """Replace whole-token glossary keys, case-insensitively, in a single pass.

    Expansions are not re-expanded; unknown tokens pass through unchanged.
    """
    pattern = glossary._pattern  # type: ignore[attr-defined]
    if pattern is None:
        return raw_line
    lowered = glossary._lowered  # type: ignore[attr-defined]
    return pattern.sub(lambda m: lowered[m.group(0).lower()], raw_line)


def truncate_log_to(incident: Incident, prediction_step: TimeStep, epoch: datetime) -> List[LogLine]:
    """Log lines stamped at or before the prediction instant, in original order.

    Raises:
        EmptyLogError: if nothing was logged by then.
    """
    cutoff = step_time(prediction_step, epoch)
    kept = [line for line in incident.log_lines if line.timestamp <= cutoff]
    if not kept:
        raise EmptyLogError(f"incident {incident.id}: no log lines at or before {cutoff}")
    return kept


@dataclass(frozen=True)
class ExtractionRequest:
    """Expanded log text for one incident, truncated to the prediction time."""

    incident_id: str
    expanded_log_text: str
    schema_version: str = EXTRACTION_SCHEMA_VERSION

    def __post_init__(self) -> None:
        if not self.expanded_log_text.strip():
            raise EmptyLogError(f"incident {self.incident_id}: empty extraction text")


def build_extraction_request(
    incident: Incident,
    prediction_step: TimeStep,
    epoch: datetime,
    glossary: Glossary,
) -> ExtractionRequest:
    """Truncate, expand, and join an incident's log into one extraction request."""
    lines = truncate_log_to(incident, prediction_step, epoch)
    expanded = "\n".join(expand_glossary(line.text, glossary) for line in lines)
    return ExtractionRequest(incident_id=incident.id, expanded_log_text=expanded)


# --- rule-based extraction ---------------------------------------------------

_VEHICLE_COUNT = re.compile(
    r"\b(\d+|one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve)\s+vehicles?\b",
    re.IGNORECASE,
)
_VEHICLE_HASH = re.compile(r"\bvehicles?\s*#\s*(\d+)", re.IGNORECASE)
_VEHICLE_MENTION = re.compile(r"\bvehicles?\b", re.IGNORECASE)
_LANE_COUNT = re.compile(
    r"\b(\d+|no|one|two|three|four|five|six|seven|eight|nine)\s+lanes?\s+"
    r"(?:is\s+|are\s+)?blocked\b",
    re.IGNORECASE,
)
_LANE_ENUM = re.compile(
    r"((?:#\d+)(?:(?:\s*,\s*|\s+and\s+|\s*&\s*)#\d+)*)\s+lanes?\b"
    r"(?:\s+(?:is|are))?(?:\s+blocked)?",
    re.IGNORECASE,
)
_LANE_ENUM_BLOCKING = re.compile(
    r"blocking\s+((?:#\d+)(?:(?:\s*,\s*|\s+and\s+|\s*&\s*)#\d+)*)\s+lanes?\b",
    re.IGNORECASE,
)
_HASH = re.compile(r"#(\d+)")
_TRUCK = re.compile(r"\b(big\s+rig|semi|truck|tractor\s+trailer)\b", re.IGNORECASE)
_AMBULANCE_TOW = re.compile(r"\b(ambulance|tow)\b", re.IGNORECASE)
_WEATHER = re.compile(r"\b(rain(?:ing)?|fog(?:gy)?|snow|ice|icy|wet|hail|wind)\b", re.IGNORECASE)


def _to_count(token: str) -> int:
    token = token.lower()
    if token in _NUMBER_WORDS:
        return _NUMBER_WORDS[token]
    return int(token)


def _vehicles_from_text(text: str) -> int:
    m = _VEHICLE_COUNT.search(text)
    if m:
        return max(_to_count(m.group(1)), 1)
    hashes = [int(h) for h in _VEHICLE_HASH.findall(text)]
    if hashes:
        return max(hashes)
    if _VEHICLE_MENTION.search(text):
        return 1
    return DEFAULT_NUM_VEHICLES


def _lanes_from_text(text: str) -> int:
    m = _LANE_COUNT.search(text)
    if m:
        return _to_count(m.group(1))
    m = _LANE_ENUM_BLOCKING.search(text)
    if m:
        return len(set(_HASH.findall(m.group(1))))
    m = _LANE_ENUM.search(text)
    if m:
        return len(set(_HASH.findall(m.group(1))))
    return DEFAULT_NUM_LANES


def extract_features_rules(expanded_log: str, incident_time: time) -> IncidentFeatures:
    """Regular-pattern extraction of vehicle and lane counts plus the extended flags.

    Falls back to the standard defaults (one vehicle, zero lanes) when the log
    is silent; never raises on content.
    """
    return IncidentFeatures(
        incident_time=incident_time,
        num_vehicles=_vehicles_from_text(expanded_log),
        num_lanes_blocked=_lanes_from_text(expanded_log),
        extended={
            "large_truck": bool(_TRUCK.search(expanded_log)),
            "ambulance_or_tow": bool(_AMBULANCE_TOW.search(expanded_log)),
            "adverse_weather": bool(_WEATHER.search(expanded_log)),
        },
    )


# --- LLM-backed extraction ---------------------------------------------------

EXTRACTION_SYSTEM_PROMPT = (
    "You extract structured attributes of a traffic incident from highway patrol "
    "log text. Respond with exactly these five lines and nothing else:\n"
    "num_vehicles: <integer>\n"
    "num_lanes_blocked: <integer>\n"
    "large_truck: <yes|no>\n"
    "ambulance_or_tow: <yes|no>\n"
    "adverse_weather: <yes|no>\n"
    "If the log does not state a value, use num_vehicles: 1, num_lanes_blocked: 0, "
    "and no for the flags."
)

EXTRACTION_RETRY_SUFFIX = (
    "\n\nYour previous response could not be parsed. Respond with ONLY the five "
    "key: value lines, one per line, no extra text."
)

_REQUIRED_KEYS = (
    "num_vehicles",
    "num_lanes_blocked",
    "large_truck",
    "ambulance_or_tow",
    "adverse_weather",
)


def _parse_extraction_response(raw: str) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for line in raw.splitlines():
        line = line.strip()
        if not line or ":" not in line:
            continue
        key, _, value = line.partition(":")
        key = key.strip().lower()
        value = value.strip().lower()
        if key in ("num_vehicles", "num_lanes_blocked"):
            if not re.fullmatch(r"\d+", value):
                raise ExtractionParseError(f"non-integer value for {key}: {value!r}", raw=raw)
            values[key] = int(value)
        elif key in ("large_truck", "ambulance_or_tow", "adverse_weather"):
            if value not in ("yes", "no"):
                raise ExtractionParseError(f"expected yes/no for {key}: {value!r}", raw=raw)
            values[key] = value == "yes"
    missing = [k for k in _REQUIRED_KEYS if k not in values]
    if missing:
        raise ExtractionParseError(f"extraction response missing keys {missing}", raw=raw)
    return values


def extract_features_llm(
    request: ExtractionRequest,
    extractor: "LlmProvider",  # noqa: F821 - protocol defined in gateway
    incident_time: time,
) -> IncidentFeatures:
    """Prompt a provider with the expanded log and parse its key-value response.

    The incident time comes from structured metadata, never from the model.
    A response that fails to parse is retried once with a clarification.

    Raises:
        ExtractionParseError: malformed response after the retry.
        ProviderError: the provider kept failing.
    """
    user = f"Incident log:\n{request.expanded_log_text}"
    raw = extractor.complete(EXTRACTION_SYSTEM_PROMPT, user)
    try:
        values = _parse_extraction_response(raw)
    except ExtractionParseError:
        raw = extractor.complete(EXTRACTION_SYSTEM_PROMPT, user + EXTRACTION_RETRY_SUFFIX)
        values = _parse_extraction_response(raw)
    return IncidentFeatures(
        incident_time=incident_time,
        num_vehicles=max(int(values["num_vehicles"]), 0),
        num_lanes_blocked=max(int(values["num_lanes_blocked"]), 0),
        extended={
            "large_truck": values["large_truck"],
            "ambulance_or_tow": values["ambulance_or_tow"],
            "adverse_weather": values["adverse_weather"],
        },
    )


def format_extraction_response(features: IncidentFeatures) -> str:
    """Render IncidentFeatures as the strict key-value block the LLM is asked for."""
    extended = features.extended or {}
    yn = lambda flag: "yes" if extended.get(flag) else "no"
    return (
        f"num_vehicles: {features.num_vehicles}\n"
        f"num_lanes_blocked: {features.num_lanes_blocked}\n"
        f"large_truck: {yn('large_truck')}\n"
        f"ambulance_or_tow: {yn('ambulance_or_tow')}\n"
        f"adverse_weather: {yn('adverse_weather')}"
    )
