"""Error taxonomy. Every error carries a stable short code used by the CLI."""


class MusqError(Exception):
    """Base class; `code` is a stable machine-readable identifier."""

    code = "error"

    def __init__(self, message=None):
        super().__init__(message or self.code)


class DegenerateSignalError(MusqError):
    code = "degenerate-signal"


class BadPlantConfigError(MusqError):
    code = "bad-plant-config"


class BadDimsError(MusqError):
    code = "bad-dims"


class MotionOutOfCanvasError(MusqError):
    code = "motion-out-of-canvas"


class NotADatasetError(MusqError):
    code = "not-a-dataset"


class CorruptDatasetError(MusqError):
    code = "corrupt-dataset"


class InconsistentDatasetError(MusqError):
    code = "inconsistent-dataset"


class DegenerateAxisError(MusqError):
    code = "degenerate-axis"


class BadWindowError(MusqError):
    code = "bad-window"


class TooFewPointsError(MusqError):
    code = "too-few-points"


class MisalignedTracksError(MusqError):
    code = "misaligned-tracks"


class ParseError(MusqError):
    code = "parse-error"


class ShapeError(MusqError):
    code = "shape-error"


class BadUnitError(MusqError):
    code = "bad-unit"


class EmptyDataError(MusqError):
    code = "empty-data"


class TooFewParticipantsError(MusqError):
    code = "too-few-participants"


class IoError(MusqError):
    code = "io-error"
