"""Exception types shared across the package."""


class NumeraireError(Exception):
    """Base class for every error raised by this package."""


class InputError(NumeraireError, ValueError):
    """Malformed or inconsistent input data."""


class NonIntegrableError(InputError):
    pass


class MeasurabilityError(InputError):
    pass


class SolverError(NumeraireError):
    """The static-deflator optimizer failed to certify optimality."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class StageError(NumeraireError):
    """An error raised inside a pipeline stage, tagged with that stage."""

    def __init__(self, stage: str, message: str, kind: str = "input"):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.detail = message
        # "input", "solver" or "precondition"; the CLI maps these to exit codes
        self.kind = kind
