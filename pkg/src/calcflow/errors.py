"""Exception types raised across calcflow."""


class CalcflowError(Exception):
    pass


# data plane

class SentinelTimestamp(CalcflowError, ValueError):
    pass


class NonMonotonicTimestamp(CalcflowError):
    pass


class BoundRegression(CalcflowError):
    pass


# calculators / registry

class DuplicateName(CalcflowError):
    pass


class NotRegistered(CalcflowError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class InvalidOptions(CalcflowError, ValueError):
    pass



class CollidingInputs(CalcflowError):
    pass


# config

class ConfigSyntaxError(CalcflowError):
    def __init__(self, message, line, col, expected=None, source=None):
        self.line = line
        self.col = col
        self.expected = expected
        self.source = source
        where = f"{source}:" if source else ""
        super().__init__(f"{where}{line}:{col}: {message}")


class DuplicateKey(ConfigSyntaxError):
    pass


class MissingInterface(CalcflowError):
    pass


class UnknownSubgraph(CalcflowError):
    pass


class RecursiveSubgraph(CalcflowError):
    pass


class CycleDetected(CalcflowError):
    pass


class Violation(CalcflowError):
    """One graph validation failure; subclasses name the kind."""


class MultipleProducers(Violation):
    pass


class UnproducedInput(Violation):
    pass


class ContractViolation(Violation):
    pass


class UnknownCalculator(Violation):
    pass


class UnknownExecutor(Violation):
    pass


class TypeMismatch(Violation, TypeError):
    """Payload or connection type incompatibility (also raised by emit)."""


class GraphValidationError(CalcflowError):
    """Raised by validation with every violation found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(f"{type(v).__name__}: {v}" for v in self.violations))

    def kinds(self):
        return {type(v).__name__ for v in self.violations}


# runtime

class StartupError(CalcflowError):
    pass


class MissingSidePacket(StartupError):
    pass


class UnknownStream(CalcflowError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class GraphTerminated(CalcflowError):
    pass


# tracing

class MalformedTrace(CalcflowError):
    pass


class LineageBroken(CalcflowError):
    pass
