"""Simulation, coupling and drift certification for branching processes with
immigration in a Levy random environment, with competition and catastrophes."""

from .certify import ControlFunctions, DriftCertificate, certify, eval_F
from .coupling import CouplingConfig, simulate_coupled, simulate_pairs
from .ergodicity import contraction_rate, stationary_estimate, wv_distance
from .errors import (AdmissibilityError, CBIREError, ConditionError, DomainError,
                     InstabilityError, NumericalError, UnsupportedCouplingError)
from .generator import apply_L, apply_L_coupled, lyapunov_check
from .model import ModelSpec, ergodicity_criterion, model_from_config
from .simulate import SimConfig, simulate_ensemble, simulate_path

__version__ = "0.1.0"
INTERFACE_REVISION = "1"

__all__ = [
    "AdmissibilityError", "CBIREError", "ConditionError", "ControlFunctions", "CouplingConfig",
    "DomainError", "DriftCertificate", "InstabilityError", "ModelSpec", "NumericalError",
    "SimConfig", "UnsupportedCouplingError", "apply_L", "apply_L_coupled", "certify",
    "contraction_rate", "ergodicity_criterion", "eval_F", "lyapunov_check", "model_from_config",
    "simulate_coupled", "simulate_ensemble", "simulate_pairs", "simulate_path",
    "stationary_estimate", "wv_distance",
]
