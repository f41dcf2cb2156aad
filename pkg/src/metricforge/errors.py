"""Exception hierarchy shared by all metricforge modules.

Every error raised by the toolkit derives from :class:`MetricForgeError`.
Errors caused by bad inputs (files, configs, manifests) map to CLI exit
code 2; failures during a training run map to exit code 3.
"""

from __future__ import annotations


class MetricForgeError(Exception):
    """Base class for all toolkit errors."""


# --- manifest / dataset ---

class ManifestError(MetricForgeError):
    """Manifest-level validation failure; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingField(ManifestError):
    pass


class DuplicateSampleId(ManifestError):
    pass


class ScoreOutOfRange(ManifestError):
    pass


class InconsistentMetricKeys(ManifestError):
    pass


class InconsistentPromptGroup(ManifestError):
    """Records sharing prompt_text carry different prompt_id values."""


class DegenerateRange(MetricForgeError):
    pass


class TooFewGroups(MetricForgeError):
    pass


# --- tensors / shapes ---

class InvalidConfig(MetricForgeError):
    pass


class ShapeMismatch(MetricForgeError):
    pass


class BadHeader(MetricForgeError):
    pass


class NonFiniteValues(MetricForgeError):
    pass


class IndexOutOfRange(MetricForgeError):
    pass


# --- training ---

class EmptySelection(MetricForgeError):
    pass


class NonPositiveLoss(MetricForgeError):
    pass


class DegenerateDenominator(MetricForgeError):
    pass


class LengthMismatch(MetricForgeError):
    pass


class EmptyManifest(MetricForgeError):
    pass


class BatchTooLarge(MetricForgeError):
    pass


class TrainingFailure(MetricForgeError):
    """An error raised after training started (inputs had validated clean)."""


# --- checkpoints ---

class VersionMismatch(MetricForgeError):
    pass


class CorruptCheckpoint(MetricForgeError):
    pass


class IoFailure(MetricForgeError):
    pass


class ChecksumMismatch(MetricForgeError):
    pass


# --- evaluation ---

class ZeroVariance(MetricForgeError):
    pass


class MetricNameMismatch(MetricForgeError):
    pass


class UnknownTemplate(MetricForgeError):
    pass


class NonPositiveGap(MetricForgeError):
    pass


# --- CLI ---

class ConfigError(MetricForgeError):
    """Run-config validation failure (unknown key, missing path, bad type)."""


# Errors that signal a failure while a run is in progress rather than bad
# input; the CLI maps these to exit code 3 instead of 2.
RUNTIME_ERRORS = (TrainingFailure, NonPositiveLoss, DegenerateDenominator, IoFailure)
