"""Exception hierarchy shared across the lab."""


class FlairError(Exception):
    pass


class DimensionError(FlairError, ValueError):
    """Operand shapes do not conform."""


class ContractError(FlairError, ValueError):
    """A precondition of an operation was violated."""


class InfeasibleJointError(FlairError, ValueError):
    pass


class CsvParseError(FlairError, ValueError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DegenerateMixtureError(FlairError, ValueError):
    pass


class ConfigError(FlairError, ValueError):
    pass


class UndefinedMetricError(FlairError, ValueError):
    """A metric needs a group (or domain size) that the records do not have."""


class TrainingAborted(FlairError, RuntimeError):
    """Raised when a loss or gradient turns non-finite.

    ``last_good_step`` names the most recent step whose parameters were finite;
    ``checkpoint`` holds a copy of them when the trainer could provide one.
    """

    def __init__(self, message, last_good_step=None, checkpoint=None):
        super().__init__(message)
        self.last_good_step = last_good_step
        self.checkpoint = checkpoint
