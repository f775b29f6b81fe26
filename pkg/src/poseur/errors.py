"""Exception types shared across the package."""


class PoseurError(Exception):
    """Base class for all package errors."""


class ContractViolation(PoseurError, ValueError):
    """An operation was called with inputs outside its contract."""


class ConfigurationError(PoseurError, ValueError):
    """A configuration value is invalid or inconsistent."""


class OracleInvalidError(PoseurError, RuntimeError):
    """A finite-difference oracle cannot be trusted (non-deterministic function)."""


class FormatError(PoseurError, ValueError):
    """A file on disk does not match the expected versioned format."""


class EmptyInputError(PoseurError, ValueError):
    """An evaluation was requested over zero items."""


class NonFiniteLossError(PoseurError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, batch_seed=None, dump_path=None):
        super().__init__(message)
        self.batch_seed = batch_seed
        self.dump_path = dump_path


class BenchmarkInvalidError(PoseurError, AssertionError):
    """EMSDA and the MSDA oracle disagreed during a benchmark."""
