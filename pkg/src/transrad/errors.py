"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid model or training configuration (CLI exit code 2)."""


class DataError(RuntimeError):
    """Broken or missing dataset files (CLI exit code 3)."""


class GenerationError(RuntimeError):
    """A synthetic scene could not be realized inside the cube."""
