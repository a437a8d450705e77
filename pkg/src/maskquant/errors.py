"""Shared error types, mapped to distinct CLI exit codes."""


class ConfigError(Exception):
    """Invalid configuration key, value, or flag combination."""


class ShapeError(ValueError):
    """Operands whose dimensions or names do not line up."""
