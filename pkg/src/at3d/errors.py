"""Exception types raised across the package."""


class At3dError(Exception):
    """Base class for every error raised by at3d."""


class ShapeError(At3dError, ValueError):
    pass


class BroadcastError(ShapeError):
    pass


class GeometryError(ShapeError):
    """A convolution or pooling would produce an empty output."""


class AxisError(At3dError, ValueError):
    pass


class RankError(At3dError, ValueError):
    pass


class NoTapeError(At3dError, RuntimeError):
    """Backward was called on a tensor that is not recorded on the active tape."""


class OracleError(At3dError, RuntimeError):
    """A finite-difference oracle saw a non-deterministic function."""


class NumericError(At3dError, ArithmeticError):
    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class LabelError(At3dError, ValueError):
    pass


class ConfigError(At3dError, ValueError):
    pass


class ContainerError(At3dError, ValueError):
    """Malformed or truncated binary tensor container."""


class CheckpointError(At3dError, ValueError):
    def __init__(self, message: str, offending: list[str] | None = None):
        super().__init__(message)
        self.offending = offending or []


class DataError(At3dError, ValueError):
    pass


class ImageError(DataError):
    pass


class ReportError(At3dError, ValueError):
    pass
