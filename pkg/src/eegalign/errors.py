"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not fit the requested operation."""


class DomainError(ValueError):
    """A numeric argument lies outside its valid domain."""


class ConfigError(ValueError):
    """A configuration value or key is invalid."""


class ContractError(RuntimeError):
    """A caller violated a documented precondition."""


class FormatError(ValueError):
    """A serialized file is malformed or truncated.

    Carries the byte offset at which decoding failed when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
