"""Exception types shared across the package."""


class OwczslError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(OwczslError, ValueError):
    """Operand extents do not line up."""


class ContractError(OwczslError, ValueError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(OwczslError, FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


class DegenerateInputError(OwczslError, ValueError):
    """Input is valid in shape but numerically degenerate (e.g. zero vector)."""


class InvalidTargetError(ContractError):
    """A class target lies outside the allowed class set."""


class ParseError(OwczslError, ValueError):
    """A text file could not be parsed; carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InfeasibleSplitError(OwczslError, ValueError):
    """Requested unseen fraction leaves some primitive without a seen pair."""


class PartnerNotFoundError(OwczslError, LookupError):
    """No valid triplet partner exists for an anchor sample."""


class UndefinedSupportError(OwczslError, ValueError):
    """A primitive has no seen co-occurring partner to compare against."""


class DivergenceError(OwczslError, FloatingPointError):
    """Training produced a non-finite loss."""


class DegenerateProtocolError(OwczslError, ValueError):
    """Evaluation cannot run, e.g. there are no unseen-labeled samples."""


class CheckpointError(OwczslError, ValueError):
    """Checkpoint is malformed or was written by an incompatible version."""
