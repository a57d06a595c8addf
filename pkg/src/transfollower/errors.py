class ContractError(ValueError):
    """Raised when an operation is called outside its documented preconditions."""


class ShapeError(ContractError):
    """Raised when tensor shapes are incompatible."""


class DivergenceError(RuntimeError):
    """Raised when training produces non-finite values."""
