"""Exception hierarchy; the CLI maps each class to its own exit code."""


class GistError(Exception):
    exit_code = 1


class ConfigError(GistError, ValueError):
    """Bad configuration or usage (invalid field, unsupported combination)."""

    exit_code = 2


class DataError(GistError):
    """Input data is missing, malformed, or violates a corpus invariant."""

    exit_code = 3


class ContractError(GistError, ValueError):
    """A caller broke a precondition (shape mismatch, masked target, ...)."""

    exit_code = 4
