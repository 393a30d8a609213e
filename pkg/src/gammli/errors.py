"""Shared exception types."""


class ValidationError(ValueError):
    """Bad user input: malformed files, schema mismatches, out-of-range values.

    The CLI maps this to exit code 2; unexpected failures exit with 1.
    """
