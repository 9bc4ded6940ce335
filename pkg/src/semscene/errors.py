"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class NumericalFailure(ArithmeticError):
    """A computation produced a non-finite value."""


class EmptyMaskError(ContractViolation):
    """A masked reduction was asked to average over zero voxels."""
