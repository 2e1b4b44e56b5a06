"""Slow/fast reduction of the linear noise approximation of reaction networks."""
from .exceptions import LnaReduceError, ModelValidationError, NumericalError
from .lna import LnaModel, SingularPerturbedLNA, TransformMatrices, assemble_lna, transform_to_sp
from .network import PhosphoParams, ReactionNetwork, build_example_phospho, validate_network
from .reduction import ReducedModel, check_assumptions, reduce

__all__ = [
    "LnaReduceError", "ModelValidationError", "NumericalError",
    "LnaModel", "SingularPerturbedLNA", "TransformMatrices", "assemble_lna", "transform_to_sp",
    "PhosphoParams", "ReactionNetwork", "build_example_phospho", "validate_network",
    "ReducedModel", "check_assumptions", "reduce",
]
