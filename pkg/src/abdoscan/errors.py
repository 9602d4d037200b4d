"""Exception hierarchy.

Everything raised on purpose by the package derives from :class:`AbdoscanError`.
The CLI maps :class:`NumericError` subclasses to exit code 3 and every other
package error to exit code 2.
"""


class AbdoscanError(Exception):
    """Base class for all package errors."""


class DataError(AbdoscanError):
    """Bad or unusable input data."""


class NumericError(AbdoscanError):
    """Numerical failure during fitting."""


class ParameterError(AbdoscanError, ValueError):
    """An argument is out of range or has the wrong shape."""


class ObjParseError(DataError):
    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class MeshStructureError(DataError):
    pass


class EmptySectionError(DataError):
    pass


class ExtractionError(DataError):
    def __init__(self, level, message):
        self.level = level
        super().__init__(f"level {level}: {message}")


class InsufficientDataError(DataError):
    pass


class StratificationError(DataError):
    pass


class SchemaError(DataError):
    pass


class RowError(DataError):
    def __init__(self, record_id, column, message):
        self.record_id = record_id
        self.column = column
        super().__init__(f"row {record_id!r}, column {column!r}: {message}")


class CompatibilityError(DataError):
    pass


class CorruptArtifactError(DataError):
    pass


class CapabilityError(AbdoscanError):
    """Operation not supported by this model variant."""


class StateError(AbdoscanError):
    """Object used before it was fitted."""


class DivergenceError(NumericError):
    def __init__(self, epoch, message="non-finite loss"):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")


class ConditioningError(NumericError):
    pass
