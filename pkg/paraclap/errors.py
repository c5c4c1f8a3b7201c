class ParaclapError(Exception):
    """Root of every error raised by the paraclap package."""


class ManifestError(ParaclapError, ValueError):
    def __init__(self, message: str, line_no: int = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class DuplicateIdError(ParaclapError, ValueError):
    pass


class UnsupportedFormatError(ParaclapError, ValueError):
    def __init__(self, prop: str, message: str):
        self.prop = prop
        super().__init__(f"unsupported {prop}: {message}")


class InsufficientDataError(ParaclapError, ValueError):
    pass


class NoVoicingError(ParaclapError, ValueError):
    pass


class UnknownLabelError(ParaclapError, ValueError):
    pass


class UnknownGenderError(ParaclapError, ValueError):
    pass


class ContextError(ParaclapError, ValueError):
    pass


class EmptyPoolError(ParaclapError, ValueError):
    pass


class ShapeError(ParaclapError, ValueError):
    pass


class DegenerateEmbeddingError(ParaclapError, ValueError):
    pass


class ContractViolationError(ParaclapError, ValueError):
    pass


class CheckpointError(ParaclapError, ValueError):
    pass


class NonFiniteLossError(ParaclapError, RuntimeError):
    def __init__(self, epoch: int, batch_index: int, loss: float):
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch_index}")


class UsageError(ParaclapError, ValueError):
    pass
