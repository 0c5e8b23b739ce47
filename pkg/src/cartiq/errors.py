"""Exception types raised across cartiq.

Every error carries an ``exit_code`` used by the command line front end:
2 for configuration problems, 3 for bad data, 4 for numerical failures.
"""


class CartiqError(Exception):
    exit_code = 3


class ConfigError(CartiqError):
    exit_code = 2


class NumericalFailure(CartiqError):
    exit_code = 4


# file ingestion
class MalformedFile(CartiqError):
    pass


class MissingMetadata(CartiqError):
    pass


class InvalidGeometry(CartiqError):
    pass


class NonBinaryValues(CartiqError):
    pass


class GridMismatch(CartiqError):
    def __init__(self, dims_a, dims_b):
        self.dims_a = tuple(dims_a)
        self.dims_b = tuple(dims_b)
        super().__init__(f"grid mismatch: {self.dims_a} vs {self.dims_b}")


# preprocessing
class DegenerateIntensity(CartiqError):
    pass


class PolicyEchoOutOfRange(CartiqError):
    pass


# fitting
class InsufficientPoints(CartiqError):
    pass


class TooFewEchoes(CartiqError):
    pass


class InvalidRange(CartiqError):
    pass


# refinement
class EmptyValidationSet(CartiqError):
    pass


# anatomy
class EmptyMask(CartiqError):
    pass


class EmptyPlate(CartiqError):
    pass


class EmptyRegion(CartiqError):
    pass


# longitudinal
class NoOverlap(CartiqError):
    pass


class ZeroPlateArea(CartiqError):
    pass


class SelectorMismatch(CartiqError):
    pass


# statistics
class ConstantColumn(CartiqError):
    pass


class ZeroMeanPair(CartiqError):
    pass


class EmptyTruth(CartiqError):
    pass


class InvalidSpec(CartiqError):
    exit_code = 2
