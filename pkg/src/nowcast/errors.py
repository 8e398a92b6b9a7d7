"""Exception types that map onto CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration or arguments (exit 2)."""


class HashMismatchError(RuntimeError):
    """An upstream artifact was produced under a different configuration (exit 3)."""


class MissingInputError(FileNotFoundError):
    """A required upstream artifact is absent (exit 4)."""
