from __future__ import annotations


class CoAError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CoAError, ValueError):
    """Invalid configuration. ``problems`` lists one message per offending key."""

    def __init__(self, problems: str | list[str]):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ShapeError(CoAError, ValueError):
    pass


class InputError(CoAError, ValueError):
    pass


class CapabilityError(CoAError, TypeError):
    """A backend lacks something the caller needs (e.g. gradients)."""


class DegenerateFusionError(CoAError, ArithmeticError):
    """Fused embedding has zero norm, so it has no direction."""


class BackendError(CoAError, RuntimeError):
    def __init__(self, message: str, *, backend: str = "", attempts: int = 1, retryable: bool = False):
        super().__init__(message)
        self.backend = backend
        self.attempts = attempts
        self.retryable = retryable


class JudgeParseError(CoAError):
    """The judge's reply had no usable ``SCORE:`` line after all retries."""

    def __init__(self, message: str, raw: list[str] | None = None):
        super().__init__(message)
        self.raw = raw or []
