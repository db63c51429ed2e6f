"""Exception hierarchy for the icvisim package.

Everything raised on purpose derives from CviError so callers (and the CLI)
can map failures to exit codes without string matching.
"""


class CviError(Exception):
    """Base class for all icvisim errors."""


class InvalidGeometryError(CviError):
    """Non-positive radius/height or non-positive cell counts."""


class AlignmentError(CviError):
    """Segment or trim boundaries that do not line up with cell faces."""


class ContractError(CviError):
    """A function precondition was violated (shapes, ranges, orderings)."""


class EvaluationError(CviError):
    """A recorded value is non-finite or otherwise unusable."""


class RecordedDomainError(EvaluationError):
    """Domain violation at record time (log of nonpositive, sqrt of negative,
    division by zero)."""


class TapeError(CviError):
    """Tape misuse: mixing nodes across tapes, backward from a non-scalar."""


class DivergenceError(CviError):
    """Iterative solve produced a non-finite iterate or failed to reduce the
    residual."""


class SingularityError(CviError):
    """Elliptic operator has a zero diagonal entry (degenerate coefficients)."""


class SchemaError(CviError):
    """Run configuration failed validation. Message carries a /path/to/key."""


class DatasetError(CviError):
    """Measurement table violates the dataset contract."""


class CheckpointError(CviError):
    """Checkpoint file is malformed, has a bad version, or fails round-trip."""
