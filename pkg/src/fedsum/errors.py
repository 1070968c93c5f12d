class ConfigError(ValueError):
    """Invalid run, pattern or problem configuration."""


class DivergenceError(FloatingPointError):
    """The global model left the finite region during a run."""
