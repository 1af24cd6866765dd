"""Exception types raised across the package."""


class StereoPoseError(Exception):
    """Base class for all package errors."""


class InvalidPose(StereoPoseError, ValueError):
    pass


class BehindCamera(StereoPoseError):
    pass


class NonPositiveDepth(StereoPoseError, ValueError):
    pass


class TooFewPoints(StereoPoseError, ValueError):
    pass


class SamplingExhausted(StereoPoseError):
    pass


class DegenerateGeometry(StereoPoseError):
    pass


class DegenerateConfiguration(StereoPoseError):
    pass


class AllHypothesesDegenerate(StereoPoseError):
    pass


class ZeroTotalWeight(StereoPoseError):
    pass


class EmptyField(StereoPoseError):
    pass


class OutOfVolume(StereoPoseError, ValueError):
    pass


class EmptyModel(StereoPoseError, ValueError):
    pass


class NoValidPoints(StereoPoseError):
    pass


class ConfigInvalid(StereoPoseError, ValueError):
    pass


class ModelLoadError(StereoPoseError):
    pass
