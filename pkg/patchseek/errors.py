from pathlib import Path
from typing import Optional


class PatchseekError(ValueError):
    """The base class for all errors raised by the package."""


class ShapeError(PatchseekError):
    """Array dimensions are inconsistent with each other or with the operation."""


class ParameterError(PatchseekError):
    """A numeric parameter is outside of its allowed range."""


class AnnotationError(PatchseekError):
    """A bounding box annotation is geometrically invalid."""


class FormatError(PatchseekError):
    """A file does not follow the expected binary or text format."""


class ParseError(PatchseekError):
    """A text line could not be parsed."""

    def __init__(
        self,
        message: str,
        path: Optional[Path] = None,
        line_number: Optional[int] = None,
    ):
        """
        Initialize the error with the location of the malformed line.

        :param message: what went wrong.
        :param path: the file being parsed.
        :param line_number: 1-based number of the malformed line.
        """
        location = ""
        if path is not None:
            location = f"{path}"
        if line_number is not None:
            location = f"{location}:{line_number}" if location else f"line {line_number}"
        super().__init__(f"{location}: {message}" if location else message)
        self.path = path
        self.line_number = line_number
