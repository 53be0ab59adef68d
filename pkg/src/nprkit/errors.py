"""Exception hierarchy.

Everything raised for bad input data derives from :class:`DataError`, which
the CLI maps to exit code 2.
"""


class DataError(ValueError):
    """Input data violates a documented contract."""


class CorpusError(DataError):
    pass


class GeoError(DataError):
    pass


class UnsupportedLatitudeError(GeoError):
    pass


class SolarError(DataError):
    pass


class MissingTimestampError(SolarError):
    """The record has no timestamp; callers should fall back to brightness."""


class LossInputError(DataError):
    pass


class NpreError(DataError):
    pass


class NpreMagicError(NpreError):
    pass


class NpreTruncatedError(NpreError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NpreFormatError(NpreError):
    pass


class NpreValueError(NpreError):
    pass


class TrainingError(DataError):
    pass


class RetrievalError(DataError):
    pass


class RoutingError(DataError):
    pass
