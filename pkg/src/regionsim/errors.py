"""Exception hierarchy shared across the package."""


class RegionsimError(Exception):
    """Base class for all package errors."""


class ShapeError(RegionsimError):
    """Operand shapes are inconsistent with the operation."""


class ParameterError(RegionsimError):
    """A numeric or structural argument is out of its valid range."""


class DegenerateInputError(RegionsimError):
    """Input is numerically degenerate (e.g. near-zero norm)."""


class EvaluationError(RegionsimError):
    """A function produced a non-finite or otherwise unusable value."""


class InitError(RegionsimError):
    """Parameter initialization failed (e.g. too few distinct samples)."""


class FitError(RegionsimError):
    """A statistical fit failed (e.g. rank-deficient covariance)."""


class SequencingError(RegionsimError):
    """Pipeline stages invoked out of order."""


class IntegrityError(RegionsimError):
    """Stored artifacts disagree with the data they are applied to."""


class ConfigError(RegionsimError):
    """Malformed or inconsistent configuration."""


class DatasetError(RegionsimError):
    """Dataset files are missing or malformed."""
