"""Provider-agnostic LLM access: HTTP adapters, a deterministic mock, parsing.

Every provider implements ``complete(system, user) -> str``. HTTP providers
add credential handling, bounded concurrency, an optional token-bucket rate
limit, and transport retries with exponential backoff. The mock providers
make the whole pipeline runnable offline and bit-reproducible.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time as _time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from datetime import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import requests

from .errors import (
    ConfigError,
    CredentialError,
    InvalidInputError,
    ParseError,
    ProviderUnavailableError,
    UnparseableResponseError,
)
from .extraction import extract_features_rules, format_extraction_response
from .model import (
    CLASSES,
    ClassThresholds,
    DEFAULT_THRESHOLDS,
    FeatureVector,
    ImpactClass,
    LabeledExample,
    impact_class_from_ratio,
)

RETRY_CLARIFICATION = (
    "\n\nRespond with exactly one word: mild, moderate or severe."
)


@dataclass(frozen=True)
class PromptPair:
    """System text (instructions + examples) and user text (one incident)."""

    system_text: str
    user_text: str


@dataclass(frozen=True)
class ProviderConfig:
    """Configuration of one model endpoint; credentials come from the environment only."""

    provider_name: str
    kind: str = "mock"  # mock | openai | anthropic | gemini
    model_id: str = ""
    endpoint: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 16
    request_timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4
    requests_per_minute: Optional[float] = None


def credential_env_var(provider_name: str) -> str:
    return re.sub(r"[^A-Z0-9]", "_", provider_name.upper()) + "_API_KEY"


class LlmProvider(ABC):
    """Minimal chat interface: one system turn, one user turn, one text reply."""

    name: str = "provider"
    model_id: str = ""

    @abstractmethod
    def complete(self, system: str, user: str) -> str:
        """Return the model's raw text response."""


class _TokenBucket:
    """Simple thread-safe token bucket; refills continuously."""

    def __init__(self, per_minute: float, sleeper: Callable[[float], None]):
        self.capacity = per_minute
        self.tokens = per_minute
        self.rate = per_minute / 60.0
        self.updated = _time.monotonic()
        self.lock = threading.Lock()
        self.sleeper = sleeper

    def acquire(self) -> None:
        while True:
            with self.lock:
                now = _time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleeper(wait)


class HttpChatProvider(LlmProvider):
    """Shared machinery of the HTTP adapters: credentials, retries, throttling."""

    def __init__(self, config: ProviderConfig, sleeper: Callable[[float], None] = _time.sleep):
        self.config = config
        self.name = config.provider_name
        self.model_id = config.model_id
        env_var = credential_env_var(config.provider_name)
        key = os.environ.get(env_var)
        if not key:
            raise CredentialError(
                f"provider {config.provider_name!r} needs the environment variable "
                f"{env_var} to be set"
            )
        self._api_key = key
        self._sleeper = sleeper
        self._semaphore = threading.BoundedSemaphore(config.max_in_flight)
        self._bucket = (
            _TokenBucket(config.requests_per_minute, sleeper)
            if config.requests_per_minute
            else None
        )

    def complete(self, system: str, user: str) -> str:
        last_error: Optional[Exception] = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleeper(2.0 ** (attempt - 1))
            if self._bucket is not None:
                self._bucket.acquire()
            with self._semaphore:
                try:
                    return self._request(system, user)
                except (requests.RequestException, _RetryableStatus) as exc:
                    last_error = exc
        raise ProviderUnavailableError(
            f"provider {self.name!r} failed after {self.config.max_retries + 1} attempts: "
            f"{last_error}"
        )

    def _post(self, url: str, headers: Dict[str, str], body: dict) -> dict:
        response = requests.post(
            url, headers=headers, json=body, timeout=self.config.request_timeout
        )
        if response.status_code == 429 or response.status_code >= 500:
            raise _RetryableStatus(f"HTTP {response.status_code}: {response.text[:200]}")
        if response.status_code != 200:
            raise ProviderUnavailableError(
                f"provider {self.name!r}: HTTP {response.status_code}: {response.text[:200]}"
            )
        return response.json()

    @abstractmethod
    def _request(self, system: str, user: str) -> str:
        """Issue one HTTP call and return the text reply."""


class _RetryableStatus(Exception):
    pass


class OpenAiChatProvider(HttpChatProvider):
    """OpenAI-style chat-completions API."""

    DEFAULT_ENDPOINT = "https://api.openai.com/v1"

    def _request(self, system: str, user: str) -> str:
        base = self.config.endpoint or self.DEFAULT_ENDPOINT
        payload = self._post(
            f"{base.rstrip('/')}/chat/completions",
            headers={"Authorization": f"Bearer {self._api_key}"},
            body={
                "model": self.config.model_id,
                "temperature": self.config.temperature,
                "max_tokens": self.config.max_output_tokens,
                "messages": [
                    {"role": "system", "content": system},
                    {"role": "user", "content": user},
                ],
            },
        )
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ParseError(f"unexpected response shape from {self.name}: {exc}") from exc


class AnthropicMessagesProvider(HttpChatProvider):
    """Anthropic messages API."""

    DEFAULT_ENDPOINT = "https://api.anthropic.com"
    API_VERSION = "2023-06-01"

    def _request(self, system: str, user: str) -> str:
        base = self.config.endpoint or self.DEFAULT_ENDPOINT
        payload = self._post(
            f"{base.rstrip('/')}/v1/messages",
            headers={"x-api-key": self._api_key, "anthropic-version": self.API_VERSION},
            body={
                "model": self.config.model_id,
                "temperature": self.config.temperature,
                "max_tokens": self.config.max_output_tokens,
                "system": system,
                "messages": [{"role": "user", "content": user}],
            },
        )
        try:
            return "".join(
                block["text"] for block in payload["content"] if block.get("type") == "text"
            )
        except (KeyError, TypeError) as exc:
            raise ParseError(f"unexpected response shape from {self.name}: {exc}") from exc


class GeminiGenerateProvider(HttpChatProvider):
    """Google Gemini generateContent API."""

    DEFAULT_ENDPOINT = "https://generativelanguage.googleapis.com/v1beta"

    def _request(self, system: str, user: str) -> str:
        base = self.config.endpoint or self.DEFAULT_ENDPOINT
        url = f"{base.rstrip('/')}/models/{self.config.model_id}:generateContent"
        payload = self._post(
            url,
            headers={"x-goog-api-key": self._api_key},
            body={
                "system_instruction": {"parts": [{"text": system}]},
                "contents": [{"role": "user", "parts": [{"text": user}]}],
                "generationConfig": {
                    "temperature": self.config.temperature,
                    "maxOutputTokens": self.config.max_output_tokens,
                },
            },
        )
        try:
            parts = payload["candidates"][0]["content"]["parts"]
            return "".join(part.get("text", "") for part in parts)
        except (KeyError, IndexError, TypeError) as exc:
            raise ParseError(f"unexpected response shape from {self.name}: {exc}") from exc


# --- response parsing ---------------------------------------------------------

_CLASS_WORD = re.compile(r"\b(mild|moderate|severe)\b")


def parse_prediction(raw: str) -> ImpactClass:
    """Accept a response iff exactly one impact-class word occurs in it.

    Case and punctuation are ignored; zero or several distinct class words is
    a parse error.
    """
    found = set(_CLASS_WORD.findall(raw.lower()))
    if len(found) != 1:
        raise ParseError(
            f"expected exactly one of mild/moderate/severe, found {sorted(found) or 'none'} "
            f"in {raw!r}"
        )
    return ImpactClass.from_word(found.pop())


def predict_impact(provider: LlmProvider, prompt: PromptPair) -> Tuple[ImpactClass, str]:
    """Send a prompt pair and parse the reply into an impact class.

    A reply that fails to parse triggers exactly one retry with an appended
    clarification; a parseable reply is never retried. Transport-level retry
    lives inside the provider.

    Returns:
        (predicted class, raw response text of the parsed reply).
    """
    raw = provider.complete(prompt.system_text, prompt.user_text)
    try:
        return parse_prediction(raw), raw
    except ParseError:
        pass
    raw = provider.complete(prompt.system_text, prompt.user_text + RETRY_CLARIFICATION)
    try:
        return parse_prediction(raw), raw
    except ParseError:
        raise UnparseableResponseError(
            f"provider {provider.name!r} reply had no single class word after retry",
            raw=raw,
        ) from None


# --- deterministic mock providers ---------------------------------------------

def mock_predict(features: FeatureVector, examples: Sequence[LabeledExample]) -> ImpactClass:
    """Nearest-centroid vote over the given examples in z-scored feature space.

    Ties (and pools with no feature variance) resolve toward the milder class.
    """
    from .selection import class_centroids, encode_feature_vector, fit_normalizer

    if not examples:
        raise InvalidInputError("mock_predict needs at least one example")
    try:
        normalizer = fit_normalizer(examples)
    except Exception:
        # No usable geometry: fall back to the mildest class present.
        return min(e.truth for e in examples)
    z = normalizer.transform(encode_feature_vector(features))
    present = sorted({e.truth for e in examples})
    best: Optional[ImpactClass] = None
    best_dist = float("inf")
    for cls in present:
        members = [e for e in examples if e.truth == cls]
        centroid = normalizer.transform_examples(members).mean(axis=0)
        dist = float(np.linalg.norm(z - centroid))
        if dist < best_dist - 1e-12:
            best, best_dist = cls, dist
    return best if best is not None else present[0]


# Parsers for the fixed prompt templates, used only by the mock provider.
_P_TIME = re.compile(r"occurred at (\d{1,2}):(\d{2}) (AM|PM)\.")
_P_VEHICLES = re.compile(r"\. (\w+) vehicles? (?:are|is) involved\.")
_P_LANES = re.compile(r"\. (\w+) lanes? (?:are|is) blocked currently\.")
_P_RHO = re.compile(
    r"speed was (?:(about the same) as|(\d+) mph (below|above)) the historical mean speed"
)
_P_DELTA = re.compile(r"after the incident is (\d+(?:\.\d+)?)%\.")
_P_HORIZON = re.compile(r"impact after (\d+) minutes\.")
_P_IMPACT = re.compile(r"\nImpact: (mild|moderate|severe)")

_WORD_TO_INT = {
    "no": 0, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9,
}


def _word_count(token: str) -> int:
    token = token.lower()
    if token in _WORD_TO_INT:
        return _WORD_TO_INT[token]
    return int(token)


def parse_user_prompt(user_text: str) -> Tuple[FeatureVector, int]:
    """Invert render_user_prompt up to its rounding; raises ParseError on mismatch."""
    m_time = _P_TIME.search(user_text)
    m_veh = _P_VEHICLES.search(user_text)
    m_lanes = _P_LANES.search(user_text)
    m_rho = _P_RHO.search(user_text)
    m_delta = _P_DELTA.search(user_text)
    m_horizon = _P_HORIZON.search(user_text)
    if not all((m_time, m_veh, m_lanes, m_rho, m_delta, m_horizon)):
        raise ParseError(f"user prompt does not match the fixed template: {user_text!r}")
    hour, minute, suffix = int(m_time.group(1)), int(m_time.group(2)), m_time.group(3)
    hour = hour % 12 + (12 if suffix == "PM" else 0)
    if m_rho.group(1):
        rho = 0.0
    else:
        rho = float(m_rho.group(2)) * (-1.0 if m_rho.group(3) == "below" else 1.0)
    features = FeatureVector(
        incident_time=time(hour, minute),
        num_vehicles=_word_count(m_veh.group(1)),
        num_lanes_blocked=_word_count(m_lanes.group(1)),
        pre_incident_relative_speed=rho,
        initial_decrease_ratio=float(m_delta.group(1)) / 100.0,
    )
    return features, int(m_horizon.group(1))


class MockPredictionProvider(LlmProvider):
    """Offline stand-in for a chat model.

    Parses the incident and the in-context examples straight out of the prompt
    texts, then answers with a nearest-centroid vote; with no examples it
    falls back to thresholding the initial decrease ratio. Deterministic by
    construction.
    """

    kind = "mock"

    def __init__(
        self,
        name: str = "mock",
        thresholds: ClassThresholds = DEFAULT_THRESHOLDS,
    ):
        self.name = name
        self.model_id = name
        self.thresholds = thresholds
        self._example_cache: Dict[int, List[LabeledExample]] = {}

    def _examples_from_system(self, system: str) -> List[LabeledExample]:
        key = hash(system)
        cached = self._example_cache.get(key)
        if cached is not None:
            return cached
        examples: List[LabeledExample] = []
        blocks = system.split("\n\n")
        for block in blocks:
            m = _P_IMPACT.search(block)
            if not m:
                continue
            features, horizon = parse_user_prompt(block)
            examples.append(
                LabeledExample(
                    feature_vector=features,
                    horizon_minutes=horizon,
                    truth=ImpactClass.from_word(m.group(1)),
                    incident_id=f"prompt-example-{len(examples)}",
                )
            )
        self._example_cache[key] = examples
        return examples

    def complete(self, system: str, user: str) -> str:
        examples = self._examples_from_system(system)
        features, _ = parse_user_prompt(user)
        if examples:
            predicted = mock_predict(features, examples)
        else:
            predicted = impact_class_from_ratio(features.initial_decrease_ratio, self.thresholds)
        return predicted.word


class MockExtractionProvider(LlmProvider):
    """Offline stand-in for the extraction model: applies the rule extractor
    to the log text it finds in the prompt and emits the key-value block."""

    kind = "mock"

    def __init__(self, name: str = "mock-extractor"):
        self.name = name
        self.model_id = name

    def complete(self, system: str, user: str) -> str:
        _, _, log_text = user.partition("Incident log:\n")
        features = extract_features_rules(log_text, incident_time=time(0, 0))
        return format_extraction_response(features)


_PROVIDER_KINDS = {
    "openai": OpenAiChatProvider,
    "anthropic": AnthropicMessagesProvider,
    "gemini": GeminiGenerateProvider,
}


def build_provider(
    config: ProviderConfig,
    thresholds: ClassThresholds = DEFAULT_THRESHOLDS,
    sleeper: Callable[[float], None] = _time.sleep,
) -> LlmProvider:
    """Instantiate the adapter named by config.kind."""
    if config.kind == "mock":
        return MockPredictionProvider(name=config.provider_name, thresholds=thresholds)
    try:
        cls = _PROVIDER_KINDS[config.kind]
    except KeyError:
        raise ConfigError(
            f"unknown provider kind {config.kind!r}; expected one of "
            f"mock, {', '.join(sorted(_PROVIDER_KINDS))}"
        ) from None
    return cls(config, sleeper=sleeper)
