"""Exception hierarchy shared across the package."""


class IlmpqError(Exception):
    """Base class for all package errors."""


class DomainError(IlmpqError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ContractViolation(IlmpqError, ValueError):
    """Inputs disagree with an operation's preconditions (shapes, schemes, ranges)."""


class UnsupportedConfigError(IlmpqError, ValueError):
    pass


class StateError(IlmpqError, RuntimeError):
    """An object is not in the state an operation requires."""


class TrainingDivergedError(IlmpqError, ArithmeticError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class InsufficientDataError(IlmpqError, ValueError):
    pass


class DegenerateAnchorsError(IlmpqError, ValueError):
    pass


class ConfigError(IlmpqError, ValueError):
    pass
