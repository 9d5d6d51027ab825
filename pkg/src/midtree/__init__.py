"""Midpoint-tree path planning on Finsler manifolds with actor-critic learning."""
from .exceptions import (DomainError, InvalidInputError, NonFiniteLossError,
                         UnsatisfiableEnvironmentError)
from .geometry import Environment, env_from_dict, finsler_norm, local_cost, make_env
from .evaluation import EvalReport, EvalTaskSpec, TimestepLedger, evaluate_success
from .learner import LearnerConfig, generate_tree, train

__version__ = "0.1.0"

__all__ = [
    "DomainError", "InvalidInputError", "NonFiniteLossError", "UnsatisfiableEnvironmentError",
    "Environment", "env_from_dict", "finsler_norm", "local_cost", "make_env",
    "EvalReport", "EvalTaskSpec", "TimestepLedger", "evaluate_success",
    "LearnerConfig", "generate_tree", "train",
]
