"""Prompt rendering: the fixed user template and the system scaffold.

Rendering is a pure function of its inputs; all number formatting is done by
hand so output is byte-identical across platforms and locales. The system
scaffold lives in a packaged template file so wording experiments need no
code change; its version string is recorded in every run manifest.
"""

from __future__ import annotations

from datetime import time
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .model import (
    ClassThresholds,
    DEFAULT_THRESHOLDS,
    FeatureVector,
    LabeledExample,
)

SCAFFOLD_VERSION = "scaffold-v1"
_SCAFFOLD_FILE = "prompt_scaffold_v1.txt"

_SMALL_COUNTS = ("no", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")


def _count_word(n: int) -> str:
    """Spell out 0-9, fall back to digits above."""
    return _SMALL_COUNTS[n] if 0 <= n <= 9 else str(n)


def render_clock(t: time) -> str:
    """12-hour clock without a leading zero, e.g. '4:49 PM'."""
    hour = t.hour % 12 or 12
    suffix = "AM" if t.hour < 12 else "PM"
    return f"{hour}:{t.minute:02d} {suffix}"


def _vehicles_sentence(n: int) -> str:
    word = _count_word(n).capitalize()
    if n == 1:
        return f"{word} vehicle is involved."
    return f"{word} vehicles are involved."


def _lanes_sentence(n: int) -> str:
    word = _count_word(n).capitalize()
    if n == 1:
        return f"{word} lane is blocked currently."
    return f"{word} lanes are blocked currently."


def _relative_speed_phrase(rho: float) -> str:
    magnitude = int(abs(rho) + 0.5)  # round half away from zero
    if magnitude == 0:
        return "about the same as the historical mean speed"
    side = "below" if rho < 0 else "above"
    return f"{magnitude} mph {side} the historical mean speed"


def render_user_prompt(features: FeatureVector, horizon_minutes: int) -> str:
    """The fixed single-incident paragraph handed to the model as the user turn."""
    return (
        f"A traffic collision incident occurred at {render_clock(features.incident_time)}. "
        f"{_vehicles_sentence(features.num_vehicles)} "
        f"{_lanes_sentence(features.num_lanes_blocked)} "
        f"The pre-incident traffic speed was "
        f"{_relative_speed_phrase(features.pre_incident_relative_speed)} "
        f"for the time of the day. "
        f"The initial decrease in speed in the first few minutes after the incident is "
        f"{features.initial_decrease_ratio * 100:.2f}%. "
        f"Predict what would be the impact after {horizon_minutes} minutes."
    )


def render_example_block(example: LabeledExample, horizon_minutes: int) -> str:
    return (
        render_user_prompt(example.feature_vector, horizon_minutes)
        + f"\nImpact: {example.truth.word}"
    )


@lru_cache(maxsize=1)
def scaffold_template() -> str:
    return (
        resources.files("incimpact")
        .joinpath("data", _SCAFFOLD_FILE)
        .read_text(encoding="utf-8")
        .rstrip("\n")
    )


def _percent(v: float) -> str:
    return f"{v * 100:g}%"


def render_system_prompt(
    examples: Sequence[LabeledExample],
    horizon_minutes: int,
    thresholds: ClassThresholds = DEFAULT_THRESHOLDS,
) -> str:
    """Scaffold plus one block per in-context example; an empty list is allowed."""
    if examples:
        blocks = "\n\n".join(render_example_block(e, horizon_minutes) for e in examples)
        section = (
            "\n\nHere are examples of incidents and their correct impact predictions:"
            f"\n\n{blocks}"
        )
    else:
        section = ""
    return scaffold_template().format(
        mild_pct=_percent(thresholds.mild_max),
        moderate_pct=_percent(thresholds.moderate_max),
        examples_section=section,
    )
