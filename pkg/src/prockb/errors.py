"""Shared exception types."""


class DataError(ValueError):
    """An input file or record violates a documented contract."""
