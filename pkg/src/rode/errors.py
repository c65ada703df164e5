"""Exception types shared across the package.

Exit-code mapping used by the CLI and the service layer:
validation problems -> 1, numerical divergence -> 2.
"""


class ValidationError(Exception):
    """Malformed or out-of-contract input data (bad file, bad id, bad ordering)."""


class ContractViolation(ValidationError):
    """An operation was called outside its preconditions."""


class NumericalDivergence(Exception):
    """A computation produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
