"""Enclave-offloaded paymaster validation for ERC-4337: protocol library and simulator."""

from .core_types import BundlerId, OptimizedBundle, RuleId, UserOp
from .gas_model import CostTable, GasMode, calibrate, model_resources, price_bundle
from .rules import RuleParams

__version__ = "0.1.0"

__all__ = [
    "BundlerId",
    "CostTable",
    "GasMode",
    "OptimizedBundle",
    "RuleId",
    "RuleParams",
    "UserOp",
    "calibrate",
    "model_resources",
    "price_bundle",
]
