"""Exception types shared across the package."""


class DataError(Exception):
    """Invalid data or configuration (CLI exit code 2)."""


class FormatError(DataError):
    """Corrupted or mismatched on-disk artifact: bad magic, version, or checksum."""
