"""Exception hierarchy shared by all mvmv modules."""


class MvmvError(Exception):
    """Base class for errors raised by mvmv."""


class InvalidArgumentError(MvmvError, ValueError):
    pass


class SolverDivergenceError(MvmvError, ArithmeticError):
    """A time-stepping scheme produced a non-finite state.

    The offending step index is kept in ``step`` and, when known, the noise
    intensity in ``epsilon``.
    """

    def __init__(self, step, epsilon=None, detail=""):
        self.step = step
        self.epsilon = epsilon
        msg = f"solver diverged at step {step}"
        if epsilon is not None:
            msg += f" (epsilon={epsilon!r})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class InfeasibleTargetError(MvmvError):
    pass


class InsufficientDataError(MvmvError):
    pass


class ConfigError(MvmvError):
    pass
