"""Exception types shared across the package."""


class RobustPropError(Exception):
    """Base class for package errors."""


class GraphFormatError(RobustPropError, ValueError):
    """Malformed graph text file."""


class ContractViolation(RobustPropError):
    """A certified numerical guarantee did not hold (e.g. kappa >= 1 after safeguards)."""


class NonFiniteError(RobustPropError, FloatingPointError):
    """A loss or gradient became non-finite; ``module`` names the offender."""

    def __init__(self, module: str, detail: str = ""):
        self.module = module
        msg = f"non-finite value in module '{module}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class SingularSystemError(RobustPropError, ArithmeticError):
    """Dense fixed-point system is not contractive / is singular."""
