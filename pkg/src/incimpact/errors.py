"""Exception hierarchy shared by all pipeline stages."""


class PipelineError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(PipelineError):
    """An argument violates a documented precondition (negative ratio, bad enum, ...)."""


class MissingHistoryError(PipelineError):
    """No historical mean speed is stored for a (sensor, time-of-day slot) pair."""


class NoUpstreamCoverageError(PipelineError):
    """No speed sensor lies in the upstream stretch of an incident."""


class InsufficientDataError(PipelineError):
    """Every (sensor, step) pair needed by a traffic computation is missing."""


class EmptyLogError(PipelineError):
    """An incident has no log lines at or before the prediction time."""


class GlossaryError(PipelineError):
    """A glossary file contains duplicate keys with conflicting expansions."""


class ParseError(PipelineError):
    """A data file or model response could not be parsed."""


class FormatError(PipelineError):
    """A data file violates a structural rule (cadence, duplicate timestamps, ...)."""


class DegeneratePoolError(PipelineError):
    """A labelled pool has no feature variance to normalize."""


class MissingClassError(PipelineError):
    """A required impact class has no members in a labelled pool."""


class InsufficientClassError(PipelineError):
    """A class has too few members for the requested draw."""


class ProviderError(PipelineError):
    """Base class for LLM provider failures."""


class CredentialError(ProviderError):
    """The environment variable holding a provider API key is not set."""


class ProviderUnavailableError(ProviderError):
    """Transport kept failing after the configured number of retries."""


class UnparseableResponseError(ProviderError):
    """A model response did not contain exactly one impact-class word."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class ExtractionUnavailableError(ProviderError):
    """The feature-extraction provider failed after retries."""


class ExtractionParseError(ProviderError):
    """An extraction response did not follow the key-value schema."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class ConfigError(PipelineError):
    """A configuration file is invalid or describes an infeasible setup."""


class StageError(PipelineError):
    """A pipeline stage aborted; the message is tagged with the stage name."""
