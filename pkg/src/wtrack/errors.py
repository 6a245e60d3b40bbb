"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`WtrkError`
and carries the process exit code the CLI maps it to.
"""


class WtrkError(Exception):
    exit_code = 1


class InputError(WtrkError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class BadMagic(InputError):
    pass


class DimMismatch(InputError):
    pass


class UnsupportedDtype(InputError):
    pass


class MissingFile(InputError, FileNotFoundError):
    pass


class ShapeMismatch(InputError):
    pass


class InvalidConfig(InputError):
    pass


class InvalidTracks(InputError):
    pass


class LengthMismatch(InputError):
    pass


class NumericalError(WtrkError, ArithmeticError):
    """Failure inside geometry or optimization."""

    exit_code = 3


class BehindCamera(NumericalError):
    pass


class NonPositiveDepth(NumericalError):
    pass


class NonFiniteObjective(NumericalError):
    def __init__(self, block, message=None):
        self.block = block
        super().__init__(message or f"non-finite value in block {block!r}")


class InsufficientTracks(NumericalError):
    pass


class InsufficientOverlap(NumericalError):
    pass


class DegenerateGeometry(NumericalError):
    pass


class NoVisibleFrames(NumericalError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"track {index} has no visible frames")


class NoVisibleCoarseNeighbors(NumericalError):
    pass


class ZeroRawDepth(NumericalError):
    pass


class EmptySparseSet(InputError):
    pass


class DegenerateFit(NumericalError):
    pass


class EmptyScene(InputError):
    pass
