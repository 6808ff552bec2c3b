"""Exception taxonomy shared across the package.

Two broad families matter to callers: ValidationError (bad arguments, bad
geometry, bad state -- the caller's fault) and StorageError (bad or missing
bytes on disk). The CLI maps them to exit codes 2 and 3 respectively.
"""


class AmalgamError(Exception):
    pass


class ValidationError(AmalgamError):
    pass


class ShapeError(ValidationError):
    """Operand shapes do not satisfy an operation's contract."""


class GeometryError(ValidationError):
    """A convolution or net schedule produces a non-integer or empty spatial size."""


class ArityError(ValidationError):
    """Wrong number or rank of arguments (non-scalar loss, missing terms, ...)."""


class AxisError(ValidationError):
    """Reduction axis out of range or repeated."""


class TapeError(ValidationError):
    """Backward invoked on a value the tape never produced."""


class OptimizerStateError(ValidationError):
    """Optimizer asked to step a parameter with no populated gradient."""


class SpecError(ValidationError):
    """A net or run specification violates its invariants."""


class NormalizationError(ValidationError):
    """A probability vector does not sum to 1 or has negative entries."""


class SelectionError(ValidationError):
    """Teacher selection asked to choose from an empty candidate set."""


class AlignmentError(ValidationError):
    """Per-teacher batches disagree on sample count."""


class CoverageError(ValidationError):
    """A task has no covering teacher or no matching head/labels."""


class SizeError(ValidationError):
    """Requested dataset sizes or fractions are inconsistent."""


class StorageError(AmalgamError):
    pass


class FormatError(StorageError):
    """Container bytes do not follow the expected layout."""


class VersionError(StorageError):
    """Container version is newer than this reader understands."""


class CorruptionError(StorageError):
    """Container checksum does not match its payload."""


class ConflictError(StorageError):
    """Registry id already taken."""


class NotFoundError(StorageError):
    """Registry id or referenced file is missing."""
