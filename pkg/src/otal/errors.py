"""Exceptions that map onto process exit codes at the CLI boundary."""


class FormatError(Exception):
    """A serialized artifact (dataset, weights) is malformed."""


class DivergenceError(Exception):
    """Training produced a non-finite loss."""
