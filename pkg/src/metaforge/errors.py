"""Exception taxonomy shared by the workbench modules."""


class MetaforgeError(Exception):
    """Base class for errors raised by this package."""


class FormatError(MetaforgeError):
    """A file did not conform to one of the interchange formats.

    Carries the offending line number when the source is line-oriented.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingFailure(MetaforgeError):
    """Training diverged or produced non-finite values.

    ``diagnostics`` holds whatever the failing trainer knew at the time
    (offending batch id, loss component, iteration count).
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MissingEmbedding(MetaforgeError):
    """A precomputed embedding lookup had no entry for the requested key."""


class GatewayError(MetaforgeError):
    """Base class for metadata gateway failures."""


class GatewayNotFound(GatewayError):
    """The gateway has no record under the requested DOI."""


class GatewayUnavailable(GatewayError):
    """The gateway could not be reached (network implementations only)."""


class MalformedResponse(GatewayError):
    """The gateway answered with something that is not a usable record."""
