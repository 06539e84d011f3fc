"""Exception types shared across the package."""


class VistaError(Exception):
    pass


class ShapeError(VistaError, ValueError):
    pass


class ConfigError(VistaError, ValueError):
    pass


class FormatError(VistaError):
    """Raised when an on-disk container is malformed or truncated."""


class ZeroVarianceSequence(VistaError, ValueError):
    pass


class DivergenceError(VistaError, RuntimeError):
    pass


class NonFiniteLoss(VistaError, RuntimeError):
    pass


class CheckpointMismatch(VistaError):
    pass


class UnknownVariant(VistaError, ValueError):
    pass


class SpecError(VistaError, ValueError):
    pass


class EmptyInput(VistaError, ValueError):
    pass
