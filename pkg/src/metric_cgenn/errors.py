"""Exception hierarchy shared by the library and the CLI."""


class CGENNError(Exception):
    """Base class for all library errors."""


class DimensionError(CGENNError, ValueError):
    """Operand dimensions disagree or exceed a supported limit."""


class GradeError(CGENNError, ValueError):
    pass


class NullVectorError(CGENNError, ValueError):
    pass


class ParityError(CGENNError, ValueError):
    pass


class NonInvertibleError(CGENNError, ValueError):
    pass


class ConvergenceError(CGENNError, RuntimeError):
    pass


class ShapeError(CGENNError, ValueError):
    pass


class LayoutError(CGENNError, ValueError):
    """Raw input does not match the declared feature layout."""


class ConfigError(CGENNError, ValueError):
    pass


class DataFormatError(CGENNError, ValueError):
    pass


class NonFiniteLossError(CGENNError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ActivationError(CGENNError, RuntimeError):
    pass


class GenerationStallError(CGENNError, RuntimeError):
    pass


class MismatchError(CGENNError, ValueError):
    """Checkpoint and dataset disagree on task or dimension."""
