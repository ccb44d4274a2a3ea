"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateMaskError(ValueError):
    """A mask selects no positions, so the normalisation is undefined."""


class IdOutOfRangeError(IndexError):
    """An integer id falls outside the table it indexes."""


class ContractError(RuntimeError):
    """An operation was called in a state its contract does not allow."""


class TextEncodingError(ValueError):
    """Input bytes are not valid UTF-8."""

    def __init__(self, offset, reason="invalid UTF-8"):
        super().__init__(f"{reason} at byte offset {offset}")
        self.offset = offset


class EmptyInputError(ValueError):
    """A corpus, article, summary or reference that must be nonempty is empty."""


class CheckpointCorruptError(RuntimeError):
    """A checkpoint directory does not match its manifest."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, last_checkpoint=None):
        msg = f"non-finite loss at step {step}"
        if last_checkpoint is not None:
            msg += f"; last good checkpoint: {last_checkpoint}"
        super().__init__(msg)
        self.step = step
        self.last_checkpoint = last_checkpoint
