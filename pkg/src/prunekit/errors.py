"""Exception hierarchy shared across prunekit."""


class PruneKitError(Exception):
    """Base class for all prunekit errors."""


class ShapeError(PruneKitError, ValueError):
    pass


class UnsupportedStructureError(PruneKitError, ValueError):
    pass


class NumericError(PruneKitError, ArithmeticError):
    pass


class InfeasibleBudgetError(PruneKitError, ValueError):
    pass


class CombinatorialGuardError(PruneKitError, ValueError):
    """Raised when exhaustive enumeration would exceed the subset guard."""


class FormatError(PruneKitError, ValueError):
    """Malformed model file, tensor blob or config."""
