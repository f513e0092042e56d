"""Shared exception root for the package."""


class CorpusSieveError(Exception):
    """Base class for every error raised by corpus-sieve."""


class ConfigError(CorpusSieveError):
    """Invalid configuration, command-line input, or input-file contract."""
