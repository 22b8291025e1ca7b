"""Exception hierarchy shared by the library, the CLI and the API."""
from typing import List, Optional


class CKSVARError(Exception):
    """Base class for every error raised by the package."""


class DataValidationError(CKSVARError, ValueError):
    """Dataset or ingestion input violates an invariant."""


class InsufficientSampleError(DataValidationError):
    pass


class SingularityError(CKSVARError, ArithmeticError):
    """A guarded denominator or system matrix is (near) singular."""


class NonPositiveDefiniteError(CKSVARError, ValueError):
    pass


class SimulationError(CKSVARError, RuntimeError):
    pass


class ParticleDegeneracyError(CKSVARError, RuntimeError):
    """All particle weights vanished at a given period."""

    def __init__(self, period: str, message: Optional[str] = None):
        self.period = period
        super().__init__(message or f"particle weights degenerate at period {period}")


class ConvergenceError(CKSVARError, RuntimeError):
    pass


class HorizonTooShortError(ConvergenceError):
    pass


class DeterminacyError(CKSVARError, ValueError):
    pass


class NestingError(CKSVARError, ValueError):
    pass


class EmptyIdentifiedSetError(CKSVARError, ValueError):
    pass


class ConfigValidationError(CKSVARError, ValueError):
    """Carries every problem found, not just the first."""

    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
