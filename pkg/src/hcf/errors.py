class HCFError(Exception):
    """Base class for all errors raised by the package."""


class NotFoundError(HCFError, LookupError):
    pass


class ContractError(HCFError, ValueError):
    """A caller broke an operation's precondition (wrong kinds, bad index, ...)."""


class IngestError(HCFError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TrainingError(HCFError, RuntimeError):
    pass


class UndefinedMetricError(HCFError, ValueError):
    pass


class ScenarioError(HCFError, ValueError):
    pass
