"""Exception types raised across the package."""


class InvalidArgument(ValueError):
    """An argument violates a documented precondition."""


class DegenerateMappingError(RuntimeError):
    """A compressor update cannot be projected back onto increasing maps."""


class ConstraintInfeasible(ValueError):
    """The orthogonality constraint cannot be met (zero-rate design)."""
