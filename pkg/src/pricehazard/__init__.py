"""Price-driven mixed hazard models for user return-time prediction."""

__version__ = "0.1.0"

from .core import EventLog, ModelParams, ModelSpec, PurchaseEvent, Variant  # noqa: E402
from .estimator import MixedHazardModel  # noqa: E402
from .infer import FitConfig  # noqa: E402

__all__ = ["EventLog", "ModelParams", "ModelSpec", "PurchaseEvent", "Variant",
           "MixedHazardModel", "FitConfig", "__version__"]
