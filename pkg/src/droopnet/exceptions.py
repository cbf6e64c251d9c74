"""Exception hierarchy shared by all droopnet modules."""


class DroopNetError(Exception):
    """Base class for every error raised by droopnet."""


class StructuralError(DroopNetError):
    """The network topology violates a requirement (disconnected, cyclic, not a star)."""


class DomainError(DroopNetError, ValueError):
    """A numeric argument lies outside its admissible domain."""


class BalanceError(DroopNetError, ValueError):
    """Nodal injections do not sum to zero."""

    def __init__(self, residual, message=None):
        self.residual = residual
        super().__init__(message or f"injections are not balanced (sum = {residual:.6g})")


class InfeasibleError(DroopNetError):
    """The flow feasibility condition fails, so no synchronized solution exists."""

    def __init__(self, stress, message=None):
        self.stress = stress
        super().__init__(message or f"power flow infeasible: stress {stress:.6g} >= 1")


class PreconditionError(DroopNetError):
    """An operation was called on inputs that do not satisfy its precondition."""


class SimulationError(DroopNetError):
    """Base class for failures during time integration."""


class ConvergenceError(SimulationError):
    """Newton iteration on the algebraic constraints failed."""

    def __init__(self, message, t=None, residual=None):
        self.t = t
        self.residual = residual
        super().__init__(message)


class StepSizeError(SimulationError):
    """The integration step fell below the admissible minimum."""


class VoltageCollapseError(SimulationError):
    """A nodal voltage magnitude reached zero or below."""


class ScenarioError(DroopNetError):
    """A scenario file could not be parsed or validated."""

    def __init__(self, message, line=None, column=None, path=None):
        self.line = line
        self.column = column
        self.path = path
        where = ""
        if path is not None:
            where = str(path)
        if line is not None:
            where += f":{line}" + (f":{column}" if column is not None else "")
        super().__init__(f"{where}: {message}" if where else message)
