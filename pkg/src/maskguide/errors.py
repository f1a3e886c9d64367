"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when caller-supplied data violates an operation's preconditions."""


class GenerationError(RuntimeError):
    """Raised when synthetic phantom construction cannot satisfy its constraints."""


class AttributionError(RuntimeError):
    """Raised when a Grad-CAM gradient cannot be obtained from the graph."""


class TrainingAbort(RuntimeError):
    """A training stage hit a non-finite loss.

    Carries enough context to locate the failing batch.
    """

    def __init__(self, message, *, stage=None, epoch=None, batch=None, fold=None):
        super().__init__(message)
        self.stage = stage
        self.epoch = epoch
        self.batch = batch
        self.fold = fold

    def __str__(self):
        parts = [super().__str__()]
        for key in ("fold", "stage", "epoch", "batch"):
            value = getattr(self, key)
            if value is not None:
                parts.append(f"{key}={value}")
        return " ".join(parts)
