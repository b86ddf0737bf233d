"""growfrag: simulation and estimation for growth-fragmentation processes.

Simulates cell populations whose members grow deterministically and split
at mass-dependent rates, together with the size-biased tagged cell and its
tilted (spine) variant; estimates the Malthus exponent, the harmonic
weight h, and the asymptotic profile; and ships the verification suites
tying population averages to tagged-cell functionals.
"""

from .backend import compiled_available, default_backend
from .families import make_model, make_tabulated_model, model_from_config
from .model import ModelSpec, flow, flow_time, survival_probability, validate

__version__ = "0.1.0"

__all__ = [
    "ModelSpec",
    "compiled_available",
    "default_backend",
    "flow",
    "flow_time",
    "make_model",
    "make_tabulated_model",
    "model_from_config",
    "survival_probability",
    "validate",
    "__version__",
]
