"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with inputs violating its preconditions."""


class NumericDomainError(ArithmeticError):
    """A non-finite value reached an operation that requires finite input."""


class FormatError(ValueError):
    """A file on disk does not match the expected (versioned) layout."""
