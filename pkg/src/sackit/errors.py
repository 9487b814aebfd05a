"""Exception classes.

Every error carries an ``exit_code`` so the command line can report the
category of failure without string matching.
"""


class SacKitError(Exception):
    exit_code = 1


class LoadError(SacKitError):
    exit_code = 2


class PairingError(LoadError):
    exit_code = 3


class ConsistencyError(LoadError):
    exit_code = 4


class ShapeError(SacKitError, ValueError):
    exit_code = 5


class ParameterError(SacKitError, ValueError):
    exit_code = 6


class DegenerateInputError(SacKitError, ValueError):
    exit_code = 7


class ConfigurationError(SacKitError, ValueError):
    exit_code = 8


class SelectionError(SacKitError):
    exit_code = 9


class AuditError(SacKitError):
    exit_code = 10


class ScheduleError(SacKitError, ValueError):
    exit_code = 11


class NonFiniteLossError(SacKitError, FloatingPointError):
    exit_code = 12

    def __init__(self, step, lr, batch_ids, value):
        self.step = step
        self.lr = lr
        self.batch_ids = list(batch_ids)
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} at step {step} (lr={lr:.3g}, batch={self.batch_ids})"
        )


class BudgetError(SacKitError, ValueError):
    exit_code = 13


class SearchError(SacKitError):
    exit_code = 14


class ContaminationError(SacKitError):
    exit_code = 15


class OutputError(SacKitError, OSError):
    exit_code = 16
