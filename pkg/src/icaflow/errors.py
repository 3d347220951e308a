"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, NumericalError and
subclasses -> 2, OSError -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration: unknown key, bad value, unknown activation tag."""


class GraphError(RuntimeError):
    """Failure inside a differentiable graph: shape mismatch, unbound input,
    non-finite intermediate. The message names the offending node."""


class NumericalError(RuntimeError):
    """A numerical contract was violated (invariant breach, divergence)."""


class DivergenceError(NumericalError):
    """Training loss became non-finite.

    Carries the iteration index at which divergence was detected and the last
    finite parameter state.
    """

    def __init__(self, message, iteration, last_state):
        super().__init__(message)
        self.iteration = iteration
        self.last_state = last_state
