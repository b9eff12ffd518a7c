"""Exception hierarchy shared by every module."""


class MotherNetError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class ParseError(MotherNetError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class UnsupportedClassCountError(MotherNetError):
    pass


class TooManyFeaturesError(MotherNetError):
    pass


class NumericInputError(MotherNetError):
    pass


class DegenerateTaskError(MotherNetError):
    pass


class PhiLayoutError(MotherNetError):
    pass


class ShapeError(MotherNetError):
    pass


class FormatError(MotherNetError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DivergenceError(MotherNetError):
    def __init__(self, message, epoch=None, step=None):
        self.epoch = epoch
        self.step = step
        super().__init__(message)


class UndefinedMetricError(MotherNetError):
    pass


class StratificationError(MotherNetError):
    pass
