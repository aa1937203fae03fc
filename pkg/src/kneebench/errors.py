"""Exception hierarchy shared across the package."""


class KneeBenchError(Exception):
    """Base class for every error raised by kneebench."""


class DegenerateSeries(KneeBenchError, ValueError):
    """A series has zero extent on one axis or repeated abscissae."""


class NonMonotone(KneeBenchError, ValueError):
    pass


class DomainError(KneeBenchError, ValueError):
    """A generating function was evaluated outside its domain."""


class RejectionExhausted(KneeBenchError, RuntimeError):
    pass


class LabelingFailed(KneeBenchError, RuntimeError):
    pass


class CompositionFailed(KneeBenchError, RuntimeError):
    pass


class FormatError(KneeBenchError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateInput(KneeBenchError, ValueError):
    pass


class NoConvergence(KneeBenchError, RuntimeError):
    pass


class ShapeMismatch(KneeBenchError, ValueError):
    pass


class GraphCycle(KneeBenchError, RuntimeError):
    pass


class ConfigError(KneeBenchError, ValueError):
    pass


class ChecksumError(KneeBenchError, ValueError):
    pass


class VersionError(KneeBenchError, ValueError):
    pass


class EmptyLabel(KneeBenchError, ValueError):
    pass


class NonFiniteLoss(KneeBenchError, FloatingPointError):
    def __init__(self, epoch, batch, value):
        self.epoch, self.batch, self.value = epoch, batch, value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
