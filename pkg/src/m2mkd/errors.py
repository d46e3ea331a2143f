"""Exception hierarchy.

Errors fall into three families that the command line maps to exit codes:
configuration (2), data (3) and numeric failure (4).
"""


class M2MKDError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(M2MKDError, ValueError):
    pass


class DataError(M2MKDError):
    pass


class NumericError(M2MKDError, ArithmeticError):
    pass


# autodiff
class ShapeMismatch(ConfigError):
    pass


class NonFiniteValue(NumericError):
    pass


class NonScalarLoss(ConfigError):
    pass


class GraphConsumed(M2MKDError, RuntimeError):
    pass


class LabelOutOfRange(DataError, ValueError):
    pass


class NonPositiveTemperature(ConfigError):
    pass


class GradCheckError(NumericError):
    pass


# blocks and structure
class BadK(ConfigError):
    pass


class MissingParameter(ConfigError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class BadArgs(ConfigError):
    pass


class PartitionMismatch(ConfigError):
    pass


class SlotOutOfRange(ConfigError, IndexError):
    pass


class WidthMismatch(ConfigError):
    pass


class ModuleCountMismatch(ConfigError):
    pass


class UnresolvedSpec(ConfigError):
    pass


# training
class MissingGrad(NumericError):
    pass


class NonFiniteLoss(NonFiniteValue):
    """Raised when a training phase hits a non-finite loss.

    ``last_good`` holds the parameter arrays from before the failing step.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class DataEmpty(DataError, ValueError):
    pass


class InsufficientSamples(DataError, ValueError):
    pass


class KExceedsClasses(ConfigError):
    pass


# io
class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class CountMismatch(DataError):
    pass


class CorruptHeader(DataError):
    pass


class VersionUnsupported(DataError):
    pass


class ManifestMismatch(ConfigError):
    pass


class MissingArtifact(DataError, FileNotFoundError):
    """An upstream phase output needed as input is absent."""
