"""Desk-scale secure federated learning simulator."""

from .datasim import LabeledDataset, PartitionPlan
from .federation import (
    CommLedger,
    FederationState,
    LearnerProfile,
    PolicyConfig,
    weighted_aggregate,
)
from .params import ModelSpec, ParameterVector, SgdConfig
from .privacy import PrivacyConfig, VulnerabilityReport

__version__ = "0.1.0"

__all__ = [
    "CommLedger",
    "FederationState",
    "LabeledDataset",
    "LearnerProfile",
    "ModelSpec",
    "ParameterVector",
    "PartitionPlan",
    "PolicyConfig",
    "PrivacyConfig",
    "SgdConfig",
    "VulnerabilityReport",
    "weighted_aggregate",
]
