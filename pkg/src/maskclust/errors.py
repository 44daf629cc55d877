"""Exception hierarchy shared by every module.

Each class maps to a distinct CLI exit code (see ``maskclust.cli``).
"""


class MaskClustError(Exception):
    exit_code = 1


class ContractViolation(MaskClustError, ValueError):
    """A caller broke an operation's precondition."""

    exit_code = 6


class DegenerateRescaleError(MaskClustError, ValueError):
    """The maximum observed distance on a subspace is zero."""

    exit_code = 5


class AggregationStuckError(MaskClustError, RuntimeError):
    """Server-side merging cannot place a centroid or proxy cluster."""

    exit_code = 4

    def __init__(self, message, orphan=None):
        super().__init__(message)
        self.orphan = orphan


class ConfigurationError(MaskClustError, ValueError):
    exit_code = 2


class ParseError(MaskClustError, ValueError):
    exit_code = 3

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class StructuralError(MaskClustError, ValueError):
    """Scenario lacks the structure an operation needs (e.g. one participant)."""

    exit_code = 7
