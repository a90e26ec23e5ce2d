"""Exception hierarchy shared across the pipeline."""


class QgenError(Exception):
    """Base class for pipeline errors."""


class DataFormatError(QgenError):
    """A data file violates its expected layout or an invariant."""


class ConfigError(QgenError):
    """Pipeline configuration is invalid or incomplete."""


class BackendError(QgenError):
    """A backend request failed."""

    def __init__(self, message: str, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable
