"""Style-conditioned diffusion trajectory planning with energy guidance."""

__version__ = "0.1.0"

from .errors import ConfigurationError, InputError, NumericalError, ResourceError, StylePlanError  # noqa: F401
