"""Exception types shared across the package."""


class OOCError(Exception):
    """Base class for all package errors."""


class ParseError(OOCError, ValueError):
    """Malformed text input."""

    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class FormatError(OOCError, ValueError):
    """Corrupt, truncated or incompatible binary file."""


class BudgetExceeded(OOCError, MemoryError):
    """Raised when an allocation would push device usage past its capacity."""

    def __init__(self, requested, available, capacity, what=""):
        self.requested = requested
        self.available = available
        self.capacity = capacity
        self.what = what
        label = f" for {what}" if what else ""
        super().__init__(
            f"device budget exceeded{label}: requested {requested} bytes, "
            f"{available} of {capacity} bytes available"
        )
