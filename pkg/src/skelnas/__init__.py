"""Differentiable architecture search for skeleton-sequence action classifiers."""

from .genotype import (
    Genotype,
    build_discrete_network,
    derive_genotype,
    parse_genotype,
    serialize_genotype,
)
from .supernet import AlphaParams, SuperNet, init_alpha
from .tensor import Parameter, Tensor

__version__ = "0.1.0"

__all__ = [
    "AlphaParams",
    "Genotype",
    "Parameter",
    "SuperNet",
    "Tensor",
    "__version__",
    "build_discrete_network",
    "derive_genotype",
    "init_alpha",
    "parse_genotype",
    "serialize_genotype",
]
