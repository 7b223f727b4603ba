"""Error taxonomy shared across modules; the CLI maps these to exit codes."""


class DataError(RuntimeError):
    """Dataset layout or content problems (exit code 3)."""


class NumericalError(RuntimeError):
    """Non-finite losses or activations during training (exit code 4)."""
