"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes or sequence lengths are inconsistent."""


class DomainError(ValueError):
    """A scalar argument is outside its valid domain."""


class SizeError(ValueError):
    """A requested size overflows the supported index range."""


class ContractError(ValueError):
    """An input violates a documented precondition (e.g. an empty mask row)."""


class ParseError(ValueError):
    """A file could not be decoded; carries the path and byte offset."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        loc = ""
        if path is not None:
            loc = f" [{path}" + (f" @ byte {offset}" if offset is not None else "") + "]"
        super().__init__(message + loc)
        self.path = path
        self.offset = offset
