"""Exception hierarchy.  ``exit_code`` is what the CLI returns for each family."""


class PpdcppError(Exception):
    exit_code = 1


class ValidationError(PpdcppError, ValueError):
    """Bad input: out-of-range parameters, unsupported combinations, malformed files."""

    exit_code = 2


class NumericalError(PpdcppError, ArithmeticError):
    exit_code = 3


class DegenerateInputError(NumericalError):
    """Data with no spread (zero sample variance, empty residuals)."""


class RankDeficiencyError(NumericalError):
    pass


class CalibrationInfeasibleError(NumericalError):
    pass


class ImproperPosteriorError(NumericalError):
    pass


class SamplerDiagnosticError(NumericalError):
    def __init__(self, msg, acceptance_rate=None):
        super().__init__(msg)
        self.acceptance_rate = acceptance_rate


class OracleError(NumericalError):
    """A test oracle could not reach its requested tolerance."""


class ScenarioFailure(NumericalError):
    pass


class DataFileError(PpdcppError, OSError):
    exit_code = 4


class FewDrawsWarning(UserWarning):
    """Monte Carlo run with too few draws for a stable estimate."""
