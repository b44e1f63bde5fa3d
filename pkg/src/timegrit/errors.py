"""Exception types shared across the package.

Configuration problems map to CLI exit code 2, solver and protocol
failures to exit code 3 (see timegrit.cli).
"""


class ConfigError(ValueError):
    """Bad experiment configuration: unknown key, unparsable value, illegal combination."""


class HierarchyError(ValueError):
    """Grid hierarchy or partition construction failed."""


class StepError(RuntimeError):
    """A time step failed; the message carries level and time index."""


class ProtocolError(RuntimeError):
    """Executor message protocol violated (deadlock suspicion, type mismatch, bad shutdown)."""


class OracleError(RuntimeError):
    """A reference computation (fixed point, cycling) cannot be produced."""
