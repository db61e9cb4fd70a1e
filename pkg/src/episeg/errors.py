"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map it without a lookup
table: 2 for bad input/usage, 3 for numerical failures.
"""


class EpisegError(Exception):
    exit_code = 2


class InputError(EpisegError, ValueError):
    """Bad argument, file or configuration."""


class NumericalError(EpisegError, ArithmeticError):
    exit_code = 3


# tilestore
class EmptyRaster(InputError):
    pass


class BadTileSize(InputError):
    pass


class OutOfBounds(InputError):
    pass


class NoSuchLevel(InputError):
    pass


class BadLabelValue(InputError):
    pass


# stain
class SingularStainMatrix(NumericalError):
    pass


# registration
class DimensionMismatch(InputError):
    pass


class GridTooSmall(InputError):
    pass


class Diverged(NumericalError):
    pass


class NonFiniteObjective(NumericalError):
    pass


# sampler
class NoPositivePixels(InputError):
    pass


# model
class NonFiniteGradient(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class BadInputSize(InputError):
    pass


class IndivisibleInput(InputError):
    pass


# eval
class EmptyRegion(InputError):
    pass


class EmptyInput(InputError):
    pass


class InvalidGrade(InputError):
    pass


# synth
class ConfigInvalid(InputError):
    pass
