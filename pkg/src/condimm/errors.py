"""Exception taxonomy shared by all condimm modules."""


class CondimmError(Exception):
    """Base class for every error raised by this package."""


class EmptyMatrix(CondimmError):
    """A matrix argument has a zero dimension."""


class ZeroMatrix(CondimmError):
    """All singular values fall below the rank tolerance."""


class DimensionMismatch(CondimmError):
    """Operand shapes are incompatible."""


class NumericalFailure(CondimmError):
    """A dense factorization did not converge or produced non-finite values."""


class NonUniqueExtreme(CondimmError):
    """The extreme singular value needed for a gradient is tied within tolerance."""


class DegenerateSpectrum(CondimmError):
    """All retained singular values coincide; the ill-conditioning penalty diverges."""


class RankOne(CondimmError):
    """Numerical rank 1: no spread to regularize, step bounds undefined."""


class SingularSystem(CondimmError):
    """The ridge-regularized covariance system could not be factorized."""


class InvalidLabels(CondimmError):
    """Binary cross-entropy targets must be a single {0,1} column."""


class StalledGradient(CondimmError):
    """Probe gradient vanished; used internally to truncate trajectories."""


class NonFiniteUpdate(CondimmError):
    """Training produced a non-finite parameter; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DegenerateReference(CondimmError):
    """A reference extractor yields a Hessian with undefined condition number."""


class EmptyInput(CondimmError):
    """An aggregation was requested over zero runs."""


class MissingColumn(CondimmError):
    """A configured CSV column is absent from the header."""


class EmptyFile(CondimmError):
    """The input file holds no data rows."""


class EmptySplit(CondimmError):
    """A configured split leaves one side with zero rows."""


class BadMagic(CondimmError):
    """An IDX file does not start with the expected magic number."""


class LabelImageCountMismatch(CondimmError):
    """IDX image and label files disagree on the record count."""


class DigitAbsent(CondimmError):
    """A requested digit class is missing or the pair is degenerate."""


class InvalidSpec(CondimmError):
    """A synthetic-data specification violates its invariants."""


class ConfigError(CondimmError):
    """A run configuration file is missing, unreadable, or inconsistent."""
