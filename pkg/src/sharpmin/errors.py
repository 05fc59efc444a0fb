"""Exception types shared across the package."""


class SharpminError(Exception):
    """Base class for all package errors."""


class ConfigError(SharpminError):
    """Invalid configuration value or combination."""


class NonFiniteError(SharpminError):
    """A tensor picked up a NaN or Inf during evaluation."""

    def __init__(self, tensor_name: str, detail: str = ""):
        self.tensor_name = tensor_name
        msg = f"non-finite values in tensor '{tensor_name}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DivergenceError(SharpminError):
    """Training loss exceeded the divergence threshold or went non-finite.

    `metrics` carries whatever per-epoch log existed when training blew
    up, so callers can still flush partial results.
    """

    def __init__(self, step: int, detail: str = "", metrics=None):
        self.step = step
        self.metrics = metrics
        msg = f"training diverged at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ParseError(SharpminError):
    """Malformed dataset file; carries the byte or line offset."""

    def __init__(self, path, offset, detail: str = ""):
        self.path = str(path)
        self.offset = offset
        msg = f"{self.path}: parse error at {offset}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
