"""Exception types raised across the package."""


class XUnitError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(XUnitError, ValueError):
    """Tensor shapes do not agree."""


class GraphError(XUnitError):
    """A tape references a value that was never recorded."""


class ContractError(XUnitError, ValueError):
    """A caller violated a documented precondition."""


class SpecError(XUnitError, ValueError):
    """An architecture or layer description is invalid."""


class FormatError(XUnitError):
    """A serialized model file is malformed."""


class DataError(XUnitError, ValueError):
    """Image data cannot be used as requested."""


class TrainingError(XUnitError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
