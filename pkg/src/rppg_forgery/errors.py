class ContractError(ValueError):
    """An operation was called outside its preconditions."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """A binary file failed to parse."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
