"""Exception types shared across the package.

Every error carries a short machine-readable ``code`` so the CLI can emit
structured error JSON; the code is the class name unless overridden.
"""


class MuseGuideError(Exception):
    """Base class for all package errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


class EmptyInput(MuseGuideError):
    """An operation received empty audio or an empty tensor."""


class InvalidAudio(MuseGuideError):
    """Audio samples are non-finite or otherwise malformed."""


class KernelTooLarge(MuseGuideError):
    """A median-filter kernel exceeds the axis it filters."""


class InvalidWidth(MuseGuideError):
    """A filter width that must be odd was even (or < 1)."""


class KTooLarge(MuseGuideError):
    """Neighbour count k exceeds the number of frames."""


class TooShort(MuseGuideError):
    """The clip is too short for the requested analysis."""


class NoBeats(MuseGuideError):
    """No onsets above the noise floor; beat tracking is impossible."""


class PitchOutOfRange(MuseGuideError):
    """A requested fundamental lies outside the synthesizable range."""


class ShapeError(MuseGuideError):
    """Tensor shapes are incompatible with the requested operation."""


class InvalidLoss(MuseGuideError):
    """Backpropagation was asked to start from a non-scalar node."""


class StepError(MuseGuideError):
    """A diffusion step index is outside [1, T]."""


class ContractViolation(MuseGuideError):
    """A frozen-parameter or single-writer contract was broken."""


class NotLoaded(MuseGuideError):
    """A required checkpoint is missing or was never loaded."""


class IngestError(MuseGuideError):
    """A dataset manifest entry could not be ingested."""


class DecodeError(MuseGuideError):
    """An audio file could not be decoded."""


class InsufficientBeats(MuseGuideError):
    """Too few pulse peaks to compute a beat-interval statistic."""


class UndefinedMetric(MuseGuideError):
    """The metric is undefined for this input (reported as absent, not 0)."""
