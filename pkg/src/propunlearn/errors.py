"""Exception types shared across the package."""


class RejectedInput(ValueError):
    """An argument violated an operation's precondition."""


class ParseError(ValueError):
    """A file or byte stream could not be decoded."""


class CapacityError(ValueError):
    """Not enough source rows to satisfy a sampling request."""


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, detail=""):
        self.epoch = epoch
        msg = f"training diverged at epoch {epoch}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnlearningFailed(RuntimeError):
    """Raised when the unlearning loop hits a non-finite gradient; carries the trace so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class ExperimentFailed(RuntimeError):
    """A run stopped part-way; ``partial`` holds whatever report data was assembled."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
