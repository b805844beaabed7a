"""Exception hierarchy shared across the package."""


class RecipeTreeError(Exception):
    """Base class for all errors raised by recipetree."""


class DimensionError(RecipeTreeError, ValueError):
    """Operand shapes do not conform."""


class DegenerateInputError(RecipeTreeError, ValueError):
    """Numerically unusable input, e.g. a zero-norm vector fed to cosine."""


class ValidationError(RecipeTreeError, ValueError):
    """A record or argument violates a documented invariant."""


class ConfigError(RecipeTreeError, ValueError):
    """Invalid configuration value or combination."""


class IngestError(RecipeTreeError, ValueError):
    """A dataset or auxiliary file could not be read or parsed."""
