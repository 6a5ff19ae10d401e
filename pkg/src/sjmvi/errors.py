"""Exception hierarchy shared by every module."""


class SjmviError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SjmviError, ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {joined}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(SjmviError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class NonFiniteError(SjmviError, FloatingPointError):
    """A forward value became NaN or infinite."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"{op}: produced non-finite values"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ContractError(SjmviError, ValueError):
    """A documented precondition of a call was violated."""


class GradCheckError(SjmviError):
    """Finite-difference probe hit a non-finite value."""

    def __init__(self, param_index, coordinate, detail=""):
        self.param_index = param_index
        self.coordinate = coordinate
        super().__init__(
            f"non-finite value at parameter {param_index}, coordinate {coordinate}"
            + (f": {detail}" if detail else "")
        )


class EmptyBankError(SjmviError, ValueError):
    """A sample bank holds no rows."""


class IdxFormatError(SjmviError, ValueError):
    """An IDX file has a bad header or a truncated payload."""


class CheckpointError(SjmviError):
    """A checkpoint file is corrupt, truncated, or of an unknown version."""


class SpecError(SjmviError, ValueError):
    """An experiment spec file is malformed or references missing paths."""


class TrainingAborted(SjmviError):
    """A loss became non-finite during training."""

    def __init__(self, step, term, detail=""):
        self.step = step
        self.term = term
        super().__init__(
            f"non-finite {term} at step {step}" + (f": {detail}" if detail else "")
        )
