"""Exception types shared across the library."""


class GaloreLiteError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GaloreLiteError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(GaloreLiteError, ValueError):
    """An argument value is outside its valid range."""


class NumericError(GaloreLiteError, ArithmeticError):
    """Non-finite values were encountered where finite ones are required."""


class ConvergenceError(GaloreLiteError, RuntimeError):
    """An iterative routine exceeded its iteration limit."""


class ProtocolError(GaloreLiteError, RuntimeError):
    """Simulated ranks fell out of lockstep or a collective was misused."""


class ConfigError(GaloreLiteError, ValueError):
    """An experiment config file is malformed or contains unknown keys."""


class DivergenceError(GaloreLiteError, RuntimeError):
    """Training loss blew up or became non-finite.

    Carries the partial run log so callers can inspect the trajectory.
    """

    def __init__(self, message, run_log=None):
        super().__init__(message)
        self.run_log = run_log
