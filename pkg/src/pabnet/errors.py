"""Exception types shared across the package.

Each maps to one CLI exit code (see ``pabnet.cli``).
"""


class PabError(Exception):
    """Base class for all package errors."""


class ShapeError(PabError, ValueError):
    """Tensor dimensions do not agree with the configured layout."""


class InvalidInputError(PabError, ValueError):
    """Input is empty or outside the domain of an operation."""


class ConfigError(PabError, ValueError):
    """A configuration key failed schema validation."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class ContractError(PabError, ValueError):
    """A sample was routed to the wrong branch (view tag mismatch)."""


class ProviderStateError(PabError, RuntimeError):
    """Pose-feature provider used before it was initialized."""


class SamplingError(PabError, ValueError):
    """Not enough identities or views to draw the requested pairs."""


class ProtocolError(PabError, ValueError):
    """Evaluation protocol preconditions are violated."""


class FormatError(PabError, ValueError):
    """A file does not match its declared format or dimensions."""


class DivergenceError(PabError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, last_finite_loss):
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"non-finite loss at step {step}; last finite loss {last_finite_loss!r}"
        )
