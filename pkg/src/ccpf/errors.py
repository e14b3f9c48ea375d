"""Exception types shared across the package."""


class CCPFError(Exception):
    """Base class for all package errors."""


class ParameterDomainError(CCPFError, ValueError):
    """A distribution or model parameter lies outside its valid domain."""


class SupportError(CCPFError, ValueError):
    """An observation lies outside the support of the distribution."""


class DegenerateLikelihoodError(CCPFError, ArithmeticError):
    """Every candidate interaction count has zero posterior weight."""


class UnsupportedCombinationError(CCPFError, ValueError):
    """A linkage/family/model combination that has no defined behaviour."""


class DataError(CCPFError):
    """Malformed input files or inconsistent datasets."""


class CheckpointError(DataError):
    """Checkpoint container could not be read or does not match."""


class UndefinedMetricError(CCPFError, ArithmeticError):
    """A summary statistic is undefined for the given inputs (e.g. zero variance)."""
