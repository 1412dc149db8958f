"""Exception taxonomy shared across the simulator."""


class FivegsimError(Exception):
    """Base class for simulator-specific failures."""


class ConfigError(FivegsimError):
    """Topology or scenario configuration is invalid."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SetupError(FivegsimError):
    """A control-plane precondition failed before traffic could flow."""


class FlowError(FivegsimError):
    """A runtime operation was attempted in an illegal state."""
