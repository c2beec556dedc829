"""Gaussian-analysis operators acting spectrally on Hermite chaos.

``derivative`` (D) lowers degree by one, ``divergence`` (I, the adjoint of D)
raises it by one, and the number operator ``L = I D`` and the
Ornstein-Uhlenbeck semigroup ``T_t = exp(-tL)`` are diagonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.linalg

from .chaos import (
    ChaosFn,
    MultiIndex,
    QuadratureGrid,
    as_points,
    inner_product,
    multi_indices,
    project,
)

__all__ = [
    "VectorField",
    "SolutionFamily",
    "ResourceGuardError",
    "derivative",
    "divergence",
    "number_operator",
    "ou_semigroup",
    "mehler_apply",
    "min_norm_field",
    "feyel_ustunel_field",
    "kernel_basis",
    "solution_family",
    "field_inner_product",
]

MAX_KERNEL_UNKNOWNS = 20000
NULL_SPACE_RTOL = 1e-10


class ResourceGuardError(RuntimeError):
    """Raised when a requested computation exceeds its size budget."""


@dataclass(frozen=True, eq=False)
class VectorField:
    """An R^n-valued field on R^n, one chaos expansion per coordinate."""

    components: tuple[ChaosFn, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a vector field needs at least one component")
        dim = comps[0].dim
        if len(comps) != dim or any(c.dim != dim for c in comps):
            raise ValueError("a field on R^n must have n components of dimension n")
        d = max(c.max_degree for c in comps)
        comps = tuple(c if c.max_degree == d else ChaosFn(dim, d, c.coeffs) for c in comps)
        object.__setattr__(self, "components", comps)

    @classmethod
    def zero(cls, dim: int, max_degree: int = 0) -> "VectorField":
        return cls(tuple(ChaosFn.zero(dim, max_degree) for _ in range(dim)))

    @classmethod
    def constant(cls, values: Sequence[float]) -> "VectorField":
        dim = len(values)
        return cls(tuple(ChaosFn.constant(dim, v) for v in values))

    @classmethod
    def from_vector(cls, dim: int, max_degree: int, vec) -> "VectorField":
        """Inverse of :meth:`to_vector`: component blocks laid out one after another."""
        m = len(multi_indices(dim, max_degree))
        vec = np.asarray(vec, dtype=float)
        return cls(tuple(ChaosFn.from_vector(dim, max_degree, vec[i * m:(i + 1) * m])
                         for i in range(dim)))

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def max_degree(self) -> int:
        return self.components[0].max_degree

    def to_vector(self, max_degree: int | None = None) -> np.ndarray:
        return np.concatenate([c.to_vector(max_degree) for c in self.components])

    def eval(self, x) -> np.ndarray:
        """Field values, shape ``(dim,)`` for one point or ``(N, dim)`` for many."""
        pts, single = as_points(x, self.dim)
        vals = np.stack([c.eval(pts) for c in self.components], axis=1)
        return vals[0] if single else vals

    __call__ = eval

    def pointwise_norm(self, x):
        vals = self.eval(x)
        return np.linalg.norm(vals, axis=-1)

    def norm_sq(self) -> float:
        """``E|u|^2`` by Parseval."""
        return math.fsum(c.norm_sq() for c in self.components)

    def norm(self) -> float:
        return math.sqrt(self.norm_sq())

    def __add__(self, other: "VectorField") -> "VectorField":
        if not isinstance(other, VectorField):
            return NotImplemented
        if other.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return VectorField(tuple(a + b for a, b in zip(self.components, other.components)))

    def __sub__(self, other: "VectorField") -> "VectorField":
        return self + (-1.0) * other

    def __mul__(self, scalar) -> "VectorField":
        return VectorField(tuple(float(scalar) * c for c in self.components))

    __rmul__ = __mul__

    def map_components(self, fn) -> "VectorField":
        return VectorField(tuple(fn(c) for c in self.components))

    def max_abs_diff(self, other: "VectorField") -> float:
        return max(a.max_abs_diff(b) for a, b in zip(self.components, other.components))

    def __repr__(self):
        return f"VectorField(dim={self.dim}, max_degree={self.max_degree})"


def field_inner_product(u: VectorField, w: VectorField) -> float:
    """``E[(u, w)]`` in L^2(mu; R^n)."""
    return math.fsum(inner_product(a, b) for a, b in zip(u.components, w.components))


def derivative(f: ChaosFn) -> VectorField:
    """Stochastic derivative: component ``i`` is the partial derivative in ``x_i``."""
    return VectorField(tuple(f.partial(i) for i in range(f.dim)))


def divergence(u: VectorField) -> ChaosFn:
    """Adjoint of :func:`derivative`.

    The coefficient at ``beta`` collects ``sqrt(beta_i) * u_i[beta - e_i]``; the
    result has degree ``u.max_degree + 1`` and zero mean.
    """
    out: dict[MultiIndex, float] = {}
    for i, comp in enumerate(u.components):
        for b, v in comp.coeffs.items():
            key = b.shift(i, 1)
            out[key] = out.get(key, 0.0) + math.sqrt(key[i]) * v
    return ChaosFn(u.dim, u.max_degree + 1, out)


def number_operator(f: ChaosFn) -> ChaosFn:
    return f.map_coeffs(lambda b, v: b.degree * v)


def ou_semigroup(f: ChaosFn, t: float) -> ChaosFn:
    """Spectral Ornstein-Uhlenbeck action: degree-k coefficients scale by ``exp(-k t)``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return f.map_coeffs(lambda b, v: math.exp(-t * b.degree) * v)


def mehler_apply(f: ChaosFn, t: float, grid: QuadratureGrid) -> ChaosFn:
    """Ornstein-Uhlenbeck semigroup through the Mehler integral.

    Evaluates ``x -> sum_j w_j f(exp(-t) x + sqrt(1 - exp(-2t)) y_j)`` at the
    grid nodes and projects the result back onto degree ``f.max_degree``. The
    same grid serves as inner rule (over ``y``) and as projection rule (over
    ``x``). Independent of :func:`ou_semigroup`, which it is meant to check.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    if grid.dim != f.dim:
        raise ValueError(f"grid dimension {grid.dim} does not match f.dim {f.dim}")
    a = math.exp(-t)
    b = math.sqrt(-math.expm1(-2.0 * t))
    y, w = grid.nodes, grid.weights

    def smoothed(x: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape[0])
        chunk = max(1, 50000 // y.shape[0])
        for start in range(0, x.shape[0], chunk):
            xs = x[start:start + chunk]
            pts = (a * xs[:, None, :] + b * y[None, :, :]).reshape(-1, f.dim)
            out[start:start + chunk] = f.eval(pts).reshape(xs.shape[0], -1) @ w
        return out

    return project(smoothed, f.dim, f.max_degree, grid)


def _invert_levels(f: ChaosFn, shift: int) -> ChaosFn:
    """Divide the coefficient at degree k by ``k + shift``; drop what would divide by zero."""
    return ChaosFn(
        f.dim,
        f.max_degree,
        {b: v / (b.degree + shift) for b, v in f.coeffs.items() if b.degree + shift != 0},
    )


def min_norm_field(alpha: ChaosFn) -> VectorField:
    """Minimal-L^2 solution ``D L^{-1}(alpha - E alpha)`` of ``I u = alpha - E alpha``.

    This is ``D`` applied to the time integral of ``T_t alpha`` over
    ``[0, inf)``; on the degree-k chaos that integral is ``1/k``.
    """
    return derivative(_invert_levels(alpha.with_mean(0.0), 0))


def feyel_ustunel_field(alpha: ChaosFn) -> VectorField:
    """The field ``(1 + L)^{-1} D alpha``, computed in that order."""
    return derivative(alpha).map_components(lambda c: _invert_levels(c, 1))


@lru_cache(maxsize=32)
def divergence_block(dim: int, degree: int) -> np.ndarray:
    """Matrix of ``I`` from homogeneous degree-``degree`` fields to degree+1 chaos.

    Columns follow component-major order over the degree-``degree`` indices of
    :func:`multi_indices`; rows follow the degree+1 indices.
    """
    all_idx = multi_indices(dim, degree + 1)
    cols = [b for b in all_idx if b.degree == degree]
    rows = [b for b in all_idx if b.degree == degree + 1]
    row_pos = {b: r for r, b in enumerate(rows)}
    mat = np.zeros((len(rows), dim * len(cols)))
    for i in range(dim):
        for c, b in enumerate(cols):
            key = b.shift(i, 1)
            mat[row_pos[key], i * len(cols) + c] = math.sqrt(key[i])
    return mat


@lru_cache(maxsize=32)
def _kernel_coefficients(dim: int, max_degree: int) -> np.ndarray:
    """Orthonormal kernel basis of ``I`` as columns in the :meth:`VectorField.to_vector` layout."""
    unknowns = dim * math.comb(dim + max_degree, dim)
    if unknowns > MAX_KERNEL_UNKNOWNS:
        raise ResourceGuardError(
            f"kernel of divergence has {unknowns} unknowns (limit {MAX_KERNEL_UNKNOWNS})"
        )
    all_idx = multi_indices(dim, max_degree)
    pos = {b: k for k, b in enumerate(all_idx)}
    m = len(all_idx)
    blocks = []
    # I maps degree-k fields to degree-(k+1) chaos, so the kernel splits by degree
    for k in range(max_degree + 1):
        level = [b for b in all_idx if b.degree == k]
        mat = divergence_block(dim, k)
        _, s, vt = scipy.linalg.svd(mat, full_matrices=True)
        tol = NULL_SPACE_RTOL * (s[0] if s.size else 0.0)
        rank = int(np.sum(s > tol))
        null = vt[rank:].T
        if null.shape[1] == 0:
            continue
        full = np.zeros((dim * m, null.shape[1]))
        for i in range(dim):
            for c, b in enumerate(level):
                full[i * m + pos[b]] = null[i * len(level) + c]
        blocks.append(full)
    if not blocks:
        return np.zeros((dim * m, 0))
    basis = np.hstack(blocks)
    basis.setflags(write=False)
    return basis


def kernel_matrix(dim: int, max_degree: int) -> np.ndarray:
    """Kernel basis of ``I`` on fields of degree ``<= max_degree``, as coefficient columns."""
    return _kernel_coefficients(dim, max_degree)


def kernel_basis(dim: int, max_degree: int) -> list[VectorField]:
    """Orthonormal basis of divergence-free fields of degree ``<= max_degree``.

    Raises
    ------
    ResourceGuardError
        If ``dim * #indices`` exceeds ``MAX_KERNEL_UNKNOWNS``.
    """
    mat = _kernel_coefficients(dim, max_degree)
    return [VectorField.from_vector(dim, max_degree, mat[:, j]) for j in range(mat.shape[1])]


@dataclass(frozen=True, eq=False)
class SolutionFamily:
    """Affine set ``base + span(kernel_basis)`` of solutions of ``I u = alpha - E alpha``."""

    alpha: ChaosFn
    base: VectorField
    kernel_basis: list[VectorField]
    kernel_matrix: np.ndarray
    degree: int
    truncated: bool = False

    def member(self, coords) -> VectorField:
        coords = np.asarray(coords, dtype=float)
        if coords.shape != (len(self.kernel_basis),):
            raise ValueError(f"expected {len(self.kernel_basis)} kernel coordinates")
        vec = self.base.to_vector(self.degree) + self.kernel_matrix @ coords
        return VectorField.from_vector(self.base.dim, self.degree, vec)

    def residual(self, u: VectorField) -> float:
        """Max coefficient error of ``I u`` against ``alpha - E alpha``."""
        return divergence(u).max_abs_diff(self.alpha.with_mean(0.0))


def solution_family(alpha: ChaosFn, degree: int | None = None) -> SolutionFamily:
    """Parametrize every solution of ``I u = alpha - E alpha`` with field degree ``<= degree``.

    ``degree`` defaults to ``alpha.max_degree``. The base field of a degree-d
    ``alpha`` has degree ``d - 1``, so it is stored at ``degree`` without loss;
    ``truncated`` records whether that storage dropped any coefficient.
    """
    d = alpha.max_degree if degree is None else degree
    if alpha.degree() > d:
        raise ValueError(f"alpha has degree {alpha.degree()} > {d}")
    v = min_norm_field(alpha)
    kept = v.map_components(lambda c: c.truncate(d))
    truncated = kept.max_abs_diff(v) > 0.0
    mat = _kernel_coefficients(alpha.dim, d)
    basis = [VectorField.from_vector(alpha.dim, d, mat[:, j]) for j in range(mat.shape[1])]
    return SolutionFamily(alpha, kept, basis, mat, d, truncated)
