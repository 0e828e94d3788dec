"""Exception types raised by the library.

Every domain error derives from :class:`IPStopError` so the command line can
map them all to exit status 1.
"""


class IPStopError(Exception):
    """Base class for domain errors."""

    @property
    def kind(self) -> str:
        return type(self).__name__


class ZeroProbabilityObservation(IPStopError):
    pass


class UnknownPhase(IPStopError):
    pass


class BadParameters(IPStopError):
    pass


class EmptySource(IPStopError):
    pass


class MalformedRow(IPStopError):
    def __init__(self, line: int, reason: str = ""):
        self.line = line
        super().__init__(f"line {line}: {reason}" if reason else f"line {line}")


class CounterOutOfRange(IPStopError):
    def __init__(self, line: int, reason: str = ""):
        self.line = line
        super().__init__(f"line {line}: {reason}" if reason else f"line {line}")


class NotConverged(IPStopError):
    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"residual {residual:.3g} after {iterations} iterations")


class ObservationSpaceTooLarge(IPStopError):
    pass


class DegenerateDenominator(IPStopError):
    pass


class NonIntervalStoppingSet(IPStopError):
    pass


class EmptyTraceSet(IPStopError):
    pass


class MissingInput(IPStopError):
    pass


class NonFiniteGradient(IPStopError):
    def __init__(self, component: str):
        self.component = component
        super().__init__(f"non-finite gradient in {component}")


class ReportError(IPStopError):
    pass
