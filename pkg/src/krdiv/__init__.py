"""Numerical laboratory for the divergence-operator representation of W1 on Gaussian spaces."""

from .chaos import ChaosFn, MultiIndex, QuadratureGrid, gauss_hermite_grid, project
from .malliavin import (
    VectorField,
    derivative,
    divergence,
    feyel_ustunel_field,
    min_norm_field,
    ou_semigroup,
)

__version__ = "0.1.0"

__all__ = [
    "ChaosFn",
    "MultiIndex",
    "QuadratureGrid",
    "VectorField",
    "derivative",
    "divergence",
    "feyel_ustunel_field",
    "gauss_hermite_grid",
    "min_norm_field",
    "ou_semigroup",
    "project",
]
