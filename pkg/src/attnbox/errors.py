"""Exception types shared across the package."""


class AttnboxError(Exception):
    """Base class for all structured errors raised by this package."""


class ValidationError(AttnboxError):
    """A domain object violates one of its invariants."""


class FormatError(AttnboxError):
    """A byte stream or text record does not conform to its format."""


class TruncationError(FormatError):
    """A binary stream ended before a complete record could be read."""

    def __init__(self, what: str, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")


class TranscriptParseError(AttnboxError):
    """A transcript response could not be parsed; carries the failing offset."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at offset {offset})")
