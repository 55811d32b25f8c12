"""Exception types shared across the package."""


class InputError(ValueError):
    """Malformed or out-of-range input (shapes, ids, resolutions)."""


class NumericError(ArithmeticError):
    """A tensor that must be finite is not."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated by the caller."""


class IngestionError(InputError):
    def __init__(self, message, offending=()):
        self.offending = list(offending)
        if self.offending:
            message = message + ": " + "; ".join(str(o) for o in self.offending)
        super().__init__(message)


class CheckpointError(RuntimeError):
    pass


class DetectorError(RuntimeError):
    def __init__(self, image_id, cause):
        self.image_id = image_id
        super().__init__(f"keypoint detector failed on image {image_id!r}: {cause}")


class TrainingAborted(NumericError):
    def __init__(self, term, step):
        self.term = term
        self.step = step
        super().__init__(f"non-finite loss term {term!r} at step {step}")
