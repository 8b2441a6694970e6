"""Exception types shared across the package."""


class RationalesError(Exception):
    """Base class for all errors raised by this package."""


class EmptyDocumentError(RationalesError):
    """Text or token sequence is empty where at least one token is required."""


class ParseError(RationalesError):
    """A serialized artifact (JSONL line, vocabulary file, report) is malformed."""


class SchemaError(RationalesError):
    """A record violates the declared schema (missing field, label out of range, oversize document)."""


class ConfigError(RationalesError):
    """A configuration value is out of its legal range or internally inconsistent."""


class TrainingError(RationalesError):
    """Training diverged; message carries the epoch and batch where it happened."""


class NumericError(RationalesError):
    """A non-finite value appeared in a numeric computation; message names the tensor."""


class ScoringError(RationalesError):
    """Per-document scoring failed; message carries the document id."""


class FaithfulnessError(RationalesError):
    """The rationale-only classifier saw tokens outside its mask; message lists document ids."""
