"""Exception hierarchy.

Validation problems derive from ``ValueError`` and numeric breakdowns from
``ArithmeticError`` so the CLI can map them onto distinct exit codes.
"""


class ValidationError(ValueError):
    """Input data, configuration or arguments violate a precondition."""


class NumericError(ArithmeticError):
    """A numerical procedure broke down."""


class NotPositiveDefinite(NumericError):
    pass


class WeightDegeneracyError(NumericError):
    """Every particle weight collapsed to zero (or became NaN)."""


class BracketError(NumericError):
    """Slice sampler stepping-out exceeded its cap."""

    def __init__(self, coordinate, steps):
        self.coordinate = coordinate
        self.steps = steps
        super().__init__(
            f"slice bracket for coordinate {coordinate!r} still inside the slice "
            f"after {steps} step-outs"
        )
