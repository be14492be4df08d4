"""Exception types shared across the package."""


class FurcnetError(Exception):
    """Base class for all furcnet errors."""


class InvalidSpecError(FurcnetError):
    """A network specification violates its constraints."""


class ShapeError(FurcnetError):
    """Array dimensions do not match a declared contract."""


class InvariantError(FurcnetError):
    """An internal consistency requirement was violated."""


class NumericError(FurcnetError):
    """Non-finite values were encountered during computation."""


class SchemaError(FurcnetError):
    """An input file does not match the documented column schema."""


class EmptyDatasetError(FurcnetError):
    """No usable rows remain after ingestion."""


class DataError(FurcnetError):
    """A data value violates a transform precondition."""


class SplitError(FurcnetError):
    """The dataset is too small to honor the requested split."""


class ModelFormatError(FurcnetError):
    """Base class for model-file parsing failures."""


class VersionMismatchError(ModelFormatError):
    """The model file declares an unsupported format version."""


class TruncatedPayloadError(ModelFormatError):
    """The model file ended before all declared content was read."""


class ShapeInconsistencyError(ModelFormatError):
    """Declared shapes in a model file disagree with its contents."""


class UnknownTokenError(ModelFormatError):
    """The model file contains an unrecognized token."""
