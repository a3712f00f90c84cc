"""Exception types shared by the package."""


class InputError(ValueError):
    """Malformed or out-of-range user input."""


class StateError(ValueError):
    """A numerical state violates an invariant (e.g. nonpositive u)."""


class ConvergenceError(RuntimeError):
    """An iterative solve failed to converge."""


class ShootingError(RuntimeError):
    """The ODE shooting procedure could not bracket or hit its target."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
