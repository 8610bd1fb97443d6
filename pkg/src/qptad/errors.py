class ConfigError(ValueError):
    """A configuration field violates its invariant."""
