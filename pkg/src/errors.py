"""
Errors Module

Exception hierarchy shared by the library, the CLI and the tool server.
"""


class GlidingError(Exception):
    """Base class for every error raised by the toolkit"""


class InvalidInputError(GlidingError, ValueError):
    """Input values violate a precondition (non-finite, non-positive, mismatched lengths)"""


class DegenerateGeometryError(InvalidInputError):
    """Geometry has no usable extent (zero-size box, collinear or collapsed polygon)"""


class AnnotationParseError(InvalidInputError):
    """A line of an annotation or detection file does not follow the grammar"""

    def __init__(self, message: str, line_no: int, line: str = ""):
        self.reason = message
        self.line_no = line_no
        self.line = line
        super().__init__(f"line {line_no}: {message}")


class TrainingDivergedError(GlidingError):
    """Loss became NaN or infinite during training"""

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss})")


class ConfigError(GlidingError):
    """Run configuration is invalid"""
