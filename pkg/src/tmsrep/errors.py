"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Malformed layer, config, or input. ``field`` names the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ArchiveError(ValueError):
    """Unreadable or inconsistent binary archive."""


class TruncatedArchiveError(ArchiveError):
    pass


class ConfigHashMismatchError(ArchiveError):
    pass
