"""Exception types shared across the package.

The CLI maps these onto exit codes: InputError -> 2, InfeasibleError and
DegenerateFamilyError -> 3, anything else -> 1.
"""


class InputError(ValueError):
    """Bad or missing user-supplied input (files, arguments, shapes)."""


class ModelValidationError(ValueError):
    """A model object or model file violates its invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("model validation failed: " + "; ".join(self.violations))


class InfeasibleError(ValueError):
    """A solve has no solution in its feasible region (e.g. probit cell
    probabilities outside the bounds implied by the margins)."""


class DegenerateFamilyError(ValueError):
    """A configuration family does not split the retained configurations
    into two non-empty sides, so the test is impossible under this prior."""
