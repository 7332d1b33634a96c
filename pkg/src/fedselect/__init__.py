"""Proactive, privacy-preserving client selection for federated learning."""

__version__ = "0.1.0"

from .distributions import FederationDataset, generate_federation  # noqa: E402
from .registry import RegistryScheme, register  # noqa: E402
from .selection import SelectionConfig, multi_time_select  # noqa: E402

__all__ = ["FederationDataset", "generate_federation", "RegistryScheme", "register",
           "SelectionConfig", "multi_time_select", "__version__"]
