class DataError(Exception):
    """Malformed or inconsistent input data (exit code 2 at the CLI)."""


class NumericalAbort(Exception):
    """NaN/Inf encountered during optimization (exit code 3 at the CLI)."""

    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step
