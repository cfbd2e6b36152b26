"""Exception hierarchy shared by every module."""


class SpecSRError(Exception):
    """Base class for all errors raised by specsr."""


class DimensionMismatch(SpecSRError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class NonFinite(SpecSRError, ValueError):
    pass


class WavelengthOrder(SpecSRError, ValueError):
    pass


class HeaderParse(SpecSRError, ValueError):
    pass


class PayloadSizeMismatch(SpecSRError, ValueError):
    pass


class UnsupportedInterleave(SpecSRError, ValueError):
    pass


class InvalidSpec(SpecSRError, ValueError):
    pass


class TooFewBands(SpecSRError, ValueError):
    pass


class TooFewPixels(SpecSRError, ValueError):
    pass


class OddDimensions(SpecSRError, ValueError):
    pass


class MissingHrBands(SpecSRError, ValueError):
    pass


class SingularSystem(SpecSRError, ArithmeticError):
    pass


class RankDeficient(SpecSRError, ArithmeticError):
    pass


class DegenerateData(SpecSRError, ValueError):
    pass


class ZeroSpectrum(SpecSRError, ValueError):
    pass


class TooSmallForWindow(SpecSRError, ValueError):
    pass


class DataEmpty(SpecSRError, ValueError):
    pass


class CheckpointError(SpecSRError, ValueError):
    pass
