"""Federated clustering of participants that observe different feature subsets."""

from .core import FeatureMask, LabeledCentroid, MaskedDataset, MaskedPoint, RescaleContext, merge_centroids
from .errors import (AggregationStuckError, ConfigurationError, ContractViolation, DegenerateRescaleError,
                     MaskClustError, ParseError, StructuralError)
from .fedkc import FederatedConfig, run_algorithm1
from .oneshot import run_algorithm2
from .partition import Scenario, chain_scenario, hub_scenario

__all__ = [
    "AggregationStuckError", "ConfigurationError", "ContractViolation", "DegenerateRescaleError",
    "FeatureMask", "FederatedConfig", "LabeledCentroid", "MaskClustError", "MaskedDataset", "MaskedPoint",
    "ParseError", "RescaleContext", "Scenario", "StructuralError", "chain_scenario", "hub_scenario",
    "merge_centroids", "run_algorithm1", "run_algorithm2",
]

__version__ = "0.1.0"
