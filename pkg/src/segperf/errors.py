"""Exception hierarchy. Every class carries the exit code the CLI returns for it."""


class SegperfError(Exception):
    """Base class for all errors raised by segperf."""

    exit_code = 1
    kind = "internal"


class ValidationError(SegperfError, ValueError):
    """Input violates a documented precondition (shapes, sizes, ranges)."""

    exit_code = 2
    kind = "validation"


class IngestionError(ValidationError):
    """A file named by a manifest or directory could not be read."""

    kind = "ingestion"

    def __init__(self, path: object, reason: str = "missing file") -> None:
        super().__init__(f"{reason}: {path}")
        self.path = path


class UndefinedScoreError(SegperfError):
    """A set score has no defined per-image value."""

    exit_code = 3
    kind = "undefined-metric"


class CalibrationError(UndefinedScoreError):
    """Calibration cannot produce a meaningful pair set."""

    kind = "calibration"


class PluginError(SegperfError):
    """A model-under-test adapter could not load or run a checkpoint."""

    kind = "plugin"


class ProtocolError(SegperfError):
    """A segmenter returned outputs that break its contract."""

    kind = "protocol"


class ReferenceSegmenterError(SegperfError):
    """The reference segmenter process failed, timed out or exited nonzero."""

    kind = "reference"

    def __init__(self, message: str, stderr: str = "") -> None:
        super().__init__(message if not stderr else f"{message}\n{stderr.strip()}")
        self.stderr = stderr


class FitError(ValidationError):
    """The mapping function cannot be fitted to the pair set."""

    kind = "fit"


class DomainError(ValidationError):
    """A mapping function was evaluated outside its domain."""

    kind = "domain"


class ArtifactError(SegperfError, ValueError):
    """A calibration artifact could not be parsed or has the wrong schema."""

    exit_code = 2
    kind = "artifact"


class ArtifactMismatchError(ValidationError):
    """A calibration artifact does not match the requested metric."""

    exit_code = 4
    kind = "artifact-mismatch"


class HarnessError(SegperfError):
    """The synthetic harness is misconfigured or was queried outside its world."""

    kind = "harness"
