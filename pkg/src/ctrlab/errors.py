"""Exception types shared across the package."""


class CtrlabError(Exception):
    """Base class for all package errors."""


class InvalidInputError(CtrlabError, ValueError):
    """Malformed arguments: empty batches, non-finite logits, bad config values."""


class DegenerateBatchError(CtrlabError):
    """A ranking term was asked to score a batch with only one label class.

    Callers decide whether this is fatal: the training loop treats it as
    "the ranking term contributes zero this step" and counts the event.
    """


class UndefinedMetricError(CtrlabError):
    """Metric is undefined for the given inputs (e.g. AUC on a single class)."""


class ParseError(CtrlabError):
    """CSV ingestion failure; the message names the offending line."""


class ConfigError(CtrlabError):
    """Config file or experiment configuration is invalid."""
