"""Shared failure type for unrecoverable pipeline errors."""


class FatalError(RuntimeError):
    """Unrecoverable runtime error; the CLI prints it to stderr and exits 2."""
