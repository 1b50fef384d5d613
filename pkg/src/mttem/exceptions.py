"""Exception hierarchy shared by all modules."""


class MTTError(Exception):
    """Base class for errors raised by mttem."""


class InvalidParameterError(MTTError, ValueError):
    """A parameter value lies outside its admissible range."""


class StructuralError(MTTError, ValueError):
    """An association record does not fit the state it is applied to."""


class NumericalError(MTTError, ArithmeticError):
    """A linear-algebra step failed (singular or indefinite matrix)."""


class FilterCollapseError(NumericalError):
    """Every particle received zero incremental weight."""

    def __init__(self, t, message=None):
        self.t = t
        super().__init__(message or f"all incremental weights are -inf at time {t}")


class DataError(MTTError, ValueError):
    """An input file is malformed; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
