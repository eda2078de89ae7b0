"""Exception taxonomy.

Three branches matter to callers: ValidationError (bad parameters or
configuration), DataError (bad or insufficient input, including every decode
failure), and NumericalError (optimization blow-ups). The CLI maps them to
exit codes 2, 3 and 4.
"""


class Error(Exception):
    """Base class for every error raised by this package."""


class ValidationError(Error):
    """A parameter or configuration value is outside its documented domain."""


class DataError(Error):
    """Input data is malformed, inconsistent or insufficient."""


class NumericalError(Error):
    """A numerical procedure failed to produce a usable result."""


class InvalidFeature(DataError):
    """Feature payload is non-finite or violates norm invariants."""


class DimensionMismatch(DataError):
    """Two lattice objects that must share dimensions do not."""


class InsufficientData(DataError):
    """Fewer data points than the operation requires."""


class InvalidManifest(DataError):
    """Dataset manifest fails schema or path validation."""


class FormatError(DataError):
    """Base class for binary decode failures."""


class BadMagic(FormatError):
    """File does not start with the expected magic bytes."""


class BadVersion(FormatError):
    """File format version is not supported."""


class Truncated(FormatError):
    """Payload ends before the header-declared size."""


class TrailingData(FormatError):
    """Payload continues past the header-declared size."""


class BadHeader(FormatError):
    """Header fields or payload values are structurally invalid."""


class DictionaryMismatch(DataError):
    """A model references a different dictionary than the one supplied."""


class InvalidWeights(ValidationError):
    """Mixture weights are negative or do not sum to one."""


class InvalidPrior(ValidationError):
    """Visibility prior must lie strictly inside (0, 1)."""


class InvalidParameter(ValidationError):
    """Scalar tuning parameter outside its valid range."""


class InvalidConfig(ValidationError):
    """Run configuration failed validation."""


class OccluderInfeasible(DataError):
    """No occluder rectangle can realize the requested occlusion level."""
