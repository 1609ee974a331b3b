"""Exception types shared across the package."""

class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class ValidationError(ValueError):
    """An input value is outside its legal domain."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, scene_id=None, step=None):
        super().__init__(message)
        self.scene_id = scene_id
        self.step = step


__all__ = ["ContractError", "ValidationError", "NumericalAbort", "ShapeError"]
