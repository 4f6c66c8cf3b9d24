"""Temperature sampling vs. scalarization for imbalanced multi-domain training."""

from .errors import (
    ConfigError,
    DivergedError,
    DomainError,
    InvalidInputError,
    MissingDataError,
    TempmixError,
    UnsupportedPlanError,
)
from .mixture import (
    DomainCatalog,
    equivalent_weights,
    f_tau_sweep,
    proportional_probs,
    temperature_probs,
    variance_factor,
    zipf_catalog,
)

__version__ = "0.1.0"
