"""Exception hierarchy shared by every stage of the pipeline."""


class UniseqError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(UniseqError, ValueError):
    pass


class NumericFault(UniseqError, ArithmeticError):
    """A NaN or infinity was produced by a tensor operation."""


class GraphError(UniseqError, ValueError):
    """Misuse of the differentiation graph (e.g. non-scalar loss)."""


class TokenRangeError(UniseqError, ValueError):
    pass


class BoxError(UniseqError, ValueError):
    pass


class ImageParseError(UniseqError, ValueError):
    pass


class ImageSizeError(UniseqError, ValueError):
    pass


class DataError(UniseqError, ValueError):
    pass


class ConfigError(UniseqError, ValueError):
    pass


class LengthError(UniseqError, ValueError):
    pass


class TemplateError(UniseqError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ContractError(UniseqError, ValueError):
    pass


class CheckpointError(UniseqError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class CompatibilityError(CheckpointError, ValueError):
    pass
