"""Orthonormal Hermite chaos on (R^n, standard Gaussian).

Functions of an n-dimensional standard Gaussian vector are stored as sparse
coefficient maps on the tensor basis

    Psi_beta(x) = prod_i h_{beta_i}(x_i),

where ``h_k`` is the probabilists' Hermite polynomial normalized so that
``E[h_j(Z) h_k(Z)] = delta_jk``.  In this basis the Gaussian L^2 inner product
is the Euclidean inner product of coefficient vectors.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

__all__ = [
    "MultiIndex",
    "ChaosFn",
    "QuadratureGrid",
    "SamplePoints",
    "hermite_eval",
    "hermite_table",
    "multi_indices",
    "gauss_hermite_grid",
    "monte_carlo_points",
    "trapezoid_points",
    "project",
    "inner_product",
    "QuadratureError",
]


class QuadratureError(RuntimeError):
    """Raised when Gauss-Hermite nodes cannot be computed reliably."""


class MultiIndex(tuple):
    """Exponent vector of a tensor Hermite basis element.

    A thin ``tuple`` subclass, so it hashes and compares like the plain tuple
    of its entries.
    """

    def __new__(cls, entries: Iterable[int]) -> "MultiIndex":
        entries = tuple(int(e) for e in entries)
        if any(e < 0 for e in entries):
            raise ValueError(f"multi-index entries must be non-negative, got {entries}")
        return super().__new__(cls, entries)

    @property
    def dim(self) -> int:
        return len(self)

    @property
    def degree(self) -> int:
        return sum(self)

    def shift(self, axis: int, amount: int) -> "MultiIndex":
        entries = list(self)
        entries[axis] += amount
        return MultiIndex(entries)

    @classmethod
    def zero(cls, dim: int) -> "MultiIndex":
        return cls((0,) * dim)

    @classmethod
    def unit(cls, dim: int, axis: int, order: int = 1) -> "MultiIndex":
        entries = [0] * dim
        entries[axis] = order
        return cls(entries)


@lru_cache(maxsize=None)
def multi_indices(dim: int, max_degree: int) -> tuple[MultiIndex, ...]:
    """All multi-indices of length ``dim`` with total degree ``<= max_degree``.

    Ordered by degree, then reverse-lexicographically within a degree. Every
    dense coefficient layout in the package uses this order.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    if max_degree < 0:
        raise ValueError("max_degree must be non-negative")
    out = []
    for deg in range(max_degree + 1):
        out.extend(MultiIndex(c) for c in _compositions(deg, dim))
    return tuple(out)


def _compositions(total: int, parts: int):
    """Tuples of ``parts`` non-negative integers summing to ``total``, reverse-lexicographic."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def hermite_table(max_degree: int, x) -> np.ndarray:
    """Values ``h_0(x), ..., h_d(x)`` stacked along a new leading axis.

    Uses the three-term recurrence
    ``h_{k+1}(x) = (x h_k(x) - sqrt(k) h_{k-1}(x)) / sqrt(k + 1)``.
    """
    x = np.asarray(x, dtype=float)
    table = np.empty((max_degree + 1,) + x.shape)
    table[0] = 1.0
    if max_degree >= 1:
        table[1] = x
    for k in range(1, max_degree):
        table[k + 1] = (x * table[k] - math.sqrt(k) * table[k - 1]) / math.sqrt(k + 1)
    return table


def hermite_eval(k: int, x):
    """Normalized probabilists' Hermite polynomial ``h_k`` at ``x``."""
    if k < 0:
        raise ValueError("Hermite order must be non-negative")
    out = hermite_table(k, x)[k]
    return float(out) if np.ndim(out) == 0 else out


def as_points(x, dim: int) -> tuple[np.ndarray, bool]:
    """Normalize ``x`` to an ``(N, dim)`` array; the flag is True for a single point."""
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0:
        pts, single = pts.reshape(1, 1), True
    elif pts.ndim == 1:
        if pts.shape[0] == dim:
            pts, single = pts[None, :], True
        elif dim == 1:
            pts, single = pts[:, None], False
        else:
            raise ValueError(f"expected a point of dimension {dim}, got {pts.shape[0]}")
    else:
        single = False
    if pts.ndim != 2 or pts.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {np.shape(x)}")
    return pts, single


def basis_matrix(indices: tuple[MultiIndex, ...], points: np.ndarray) -> np.ndarray:
    """Matrix ``B[j, b] = Psi_{indices[b]}(points[j])``."""
    dim = points.shape[1]
    max_deg = max((max(b) for b in indices), default=0)
    tables = [hermite_table(max_deg, points[:, i]) for i in range(dim)]
    idx = np.asarray(indices, dtype=int).reshape(len(indices), dim)
    out = np.ones((points.shape[0], len(indices)))
    for i in range(dim):
        out *= tables[i][idx[:, i]].T
    return out


@dataclass(frozen=True, eq=False)
class ChaosFn:
    """Truncated Hermite chaos expansion of a function on R^n.

    Parameters
    ----------
    dim : int
        Dimension ``n`` of the underlying Gaussian space.
    max_degree : int
        Truncation degree ``d``; every stored index has degree ``<= d``.
    coeffs : mapping
        Sparse map ``MultiIndex -> float``. Missing entries are zero.
    """

    dim: int
    max_degree: int
    coeffs: Mapping[MultiIndex, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.max_degree < 0:
            raise ValueError("max_degree must be non-negative")
        clean = {}
        for key, val in self.coeffs.items():
            beta = key if isinstance(key, MultiIndex) else MultiIndex(key)
            if beta.dim != self.dim:
                raise ValueError(f"index {tuple(beta)} does not have dimension {self.dim}")
            if beta.degree > self.max_degree:
                raise ValueError(
                    f"index {tuple(beta)} exceeds max_degree {self.max_degree}"
                )
            clean[beta] = float(val)
        object.__setattr__(self, "coeffs", clean)

    # -- constructors -------------------------------------------------------

    @classmethod
    def zero(cls, dim: int, max_degree: int = 0) -> "ChaosFn":
        return cls(dim, max_degree, {})

    @classmethod
    def constant(cls, dim: int, value: float, max_degree: int = 0) -> "ChaosFn":
        return cls(dim, max_degree, {MultiIndex.zero(dim): value})

    @classmethod
    def basis(cls, beta, scale: float = 1.0, max_degree: int | None = None) -> "ChaosFn":
        beta = MultiIndex(beta)
        d = beta.degree if max_degree is None else max_degree
        return cls(beta.dim, d, {beta: scale})

    @classmethod
    def from_vector(cls, dim: int, max_degree: int, vec) -> "ChaosFn":
        """Inverse of :meth:`to_vector` (dense layout of :func:`multi_indices`)."""
        indices = multi_indices(dim, max_degree)
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (len(indices),):
            raise ValueError(f"expected vector of length {len(indices)}, got {vec.shape}")
        return cls(dim, max_degree, {b: v for b, v in zip(indices, vec) if v != 0.0})

    # -- accessors ----------------------------------------------------------

    def __getitem__(self, beta) -> float:
        return self.coeffs.get(MultiIndex(beta), 0.0)

    def to_vector(self, max_degree: int | None = None) -> np.ndarray:
        d = self.max_degree if max_degree is None else max_degree
        indices = multi_indices(self.dim, d)
        return np.array([self.coeffs.get(b, 0.0) for b in indices])

    @property
    def mean(self) -> float:
        return self.coeffs.get(MultiIndex.zero(self.dim), 0.0)

    def norm_sq(self) -> float:
        """Parseval: ``E[f^2]`` as the sum of squared coefficients."""
        return math.fsum(v * v for v in self.coeffs.values())

    def norm(self) -> float:
        return math.sqrt(self.norm_sq())

    def degree(self) -> int:
        """Highest degree carrying a nonzero coefficient (0 for the zero function)."""
        return max((b.degree for b, v in self.coeffs.items() if v != 0.0), default=0)

    def __call__(self, x):
        return self.eval(x)

    def eval(self, x):
        """Evaluate at one point (length ``dim``) or at a stack of points ``(N, dim)``."""
        pts, single = as_points(x, self.dim)
        if not self.coeffs:
            vals = np.zeros(pts.shape[0])
        else:
            keys = tuple(self.coeffs)
            c = np.fromiter((self.coeffs[k] for k in keys), float, len(keys))
            vals = basis_matrix(keys, pts) @ c
        return float(vals[0]) if single else vals

    # -- arithmetic ---------------------------------------------------------

    def _check(self, other: "ChaosFn"):
        if not isinstance(other, ChaosFn):
            return NotImplemented
        if other.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return None

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = ChaosFn.constant(self.dim, other)
        if self._check(other) is NotImplemented:
            return NotImplemented
        out = dict(self.coeffs)
        for b, v in other.coeffs.items():
            out[b] = out.get(b, 0.0) + v
        return ChaosFn(self.dim, max(self.max_degree, other.max_degree), out)

    __radd__ = __add__

    def __neg__(self):
        return ChaosFn(self.dim, self.max_degree, {b: -v for b, v in self.coeffs.items()})

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return self + (-other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, scalar):
        if not isinstance(scalar, (int, float, np.floating, np.integer)):
            return NotImplemented
        s = float(scalar)
        return ChaosFn(self.dim, self.max_degree, {b: s * v for b, v in self.coeffs.items()})

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / float(scalar))

    def map_coeffs(self, fn: Callable[[MultiIndex, float], float]) -> "ChaosFn":
        """Apply ``fn(beta, value)`` to every stored coefficient."""
        return ChaosFn(self.dim, self.max_degree, {b: fn(b, v) for b, v in self.coeffs.items()})

    def truncate(self, max_degree: int) -> "ChaosFn":
        return ChaosFn(
            self.dim, max_degree, {b: v for b, v in self.coeffs.items() if b.degree <= max_degree}
        )

    def with_mean(self, value: float) -> "ChaosFn":
        out = dict(self.coeffs)
        out[MultiIndex.zero(self.dim)] = float(value)
        return ChaosFn(self.dim, self.max_degree, out)

    def partial(self, axis: int) -> "ChaosFn":
        """Partial derivative in coordinate ``axis`` (uses ``h_k' = sqrt(k) h_{k-1}``)."""
        if not 0 <= axis < self.dim:
            raise ValueError(f"axis {axis} out of range for dim {self.dim}")
        out: dict[MultiIndex, float] = {}
        for b, v in self.coeffs.items():
            if b[axis] > 0:
                out[b.shift(axis, -1)] = math.sqrt(b[axis]) * v
        return ChaosFn(self.dim, max(self.max_degree - 1, 0), out)

    def max_abs_diff(self, other: "ChaosFn") -> float:
        """Largest coefficientwise absolute difference."""
        keys = set(self.coeffs) | set(other.coeffs)
        return max((abs(self.coeffs.get(k, 0.0) - other.coeffs.get(k, 0.0)) for k in keys),
                   default=0.0)

    def __repr__(self):
        nz = sum(1 for v in self.coeffs.values() if v != 0.0)
        return f"ChaosFn(dim={self.dim}, max_degree={self.max_degree}, nonzero={nz})"


def inner_product(f: ChaosFn, g: ChaosFn) -> float:
    """Gaussian L^2 pairing ``E[f g]`` of two expansions."""
    if f.dim != g.dim:
        raise ValueError(f"dimension mismatch: {f.dim} vs {g.dim}")
    small, large = (f, g) if len(f.coeffs) <= len(g.coeffs) else (g, f)
    return math.fsum(v * large.coeffs.get(b, 0.0) for b, v in small.coeffs.items())


@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    """Tensor Gauss-Hermite rule for the standard Gaussian weight.

    Nodes are ordered as ``itertools.product`` over the 1-D rule (last axis
    fastest); every reduction over the grid sums in this order.
    """

    dim: int
    nodes_per_axis: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def exactness(self) -> int:
        """Per-axis polynomial degree integrated exactly."""
        return 2 * self.nodes_per_axis - 1

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))


@dataclass(frozen=True, eq=False)
class SamplePoints:
    """Weighted point set approximating the standard Gaussian.

    Built by :func:`monte_carlo_points` (equal weights) or
    :func:`trapezoid_points` (Gaussian density times cell volume).
    """

    dim: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def exactness(self) -> int:
        return 0

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))


def trapezoid_points(dim: int, spacing: float, half_width: float = 8.0) -> SamplePoints:
    """Tensor trapezoid rule for ``gamma_dim`` on the box ``[-half_width, half_width]^dim``.

    Unlike Gauss-Hermite, the error on integrands with kinks (such as ``|u|``)
    decays like ``spacing**2`` instead of like one over the node count.
    Weights are renormalized to sum to one.
    """
    if dim < 1 or spacing <= 0 or half_width <= 0:
        raise ValueError("dim, spacing and half_width must be positive")
    count = int(round(half_width / spacing))
    x = spacing * np.arange(-count, count + 1)
    w = np.exp(-0.5 * x * x)
    w /= w.sum()
    nodes = np.stack([g.ravel() for g in np.meshgrid(*([x] * dim), indexing="ij")], axis=1)
    weights = np.ones(1)
    for _ in range(dim):
        weights = np.outer(weights, w).ravel()
    return SamplePoints(dim, nodes, weights / weights.sum())


@lru_cache(maxsize=64)
def _gh_1d(q: int) -> tuple[np.ndarray, np.ndarray]:
    with np.errstate(all="raise"):
        try:
            x, w = hermegauss(q)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            raise QuadratureError(f"Gauss-Hermite rule with {q} nodes failed: {exc}") from exc
    w = w / math.sqrt(2.0 * math.pi)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w))) or abs(w.sum() - 1.0) > 1e-12:
        raise QuadratureError(f"Gauss-Hermite rule with {q} nodes is inaccurate")
    # hermegauss is symmetric up to rounding; enforce it so odd moments vanish exactly
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    w = w / math.fsum(w)
    return x, w


def gauss_hermite_grid(dim: int, nodes_per_axis: int) -> QuadratureGrid:
    """Tensorized Gauss-Hermite grid with weights summing to one."""
    if nodes_per_axis < 1:
        raise ValueError("nodes_per_axis must be >= 1")
    if dim < 1:
        raise ValueError("dim must be positive")
    x, w = _gh_1d(nodes_per_axis)
    nodes = np.array(list(itertools.product(x, repeat=dim)), dtype=float).reshape(-1, dim)
    weights = np.array([math.prod(c) for c in itertools.product(w, repeat=dim)])
    return QuadratureGrid(dim, nodes_per_axis, nodes, weights)


def monte_carlo_points(dim: int, count: int, seed) -> SamplePoints:
    """``count`` standard Gaussian points with weights ``1/count``."""
    rng = np.random.default_rng(seed)
    nodes = rng.standard_normal((count, dim))
    return SamplePoints(dim, nodes, np.full(count, 1.0 / count))


def project(
    sampler: Callable[[np.ndarray], np.ndarray],
    dim: int,
    max_degree: int,
    grid: QuadratureGrid,
) -> ChaosFn:
    """Project a pointwise function onto the chaos of degree ``<= max_degree``.

    ``sampler`` is called once with the ``(N, dim)`` array of grid nodes and
    must return ``N`` values.
    """
    if grid.dim != dim:
        raise ValueError(f"grid dimension {grid.dim} does not match dim {dim}")
    if grid.exactness < 2 * max_degree:
        warnings.warn(
            f"grid exactness {grid.exactness} < 2*max_degree={2 * max_degree}; "
            "projection will alias",
            stacklevel=2,
        )
    vals = np.asarray(sampler(grid.nodes), dtype=float).reshape(-1)
    if vals.shape[0] != grid.nodes.shape[0]:
        raise ValueError("sampler returned the wrong number of values")
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise ValueError(f"non-finite sampler value at node {grid.nodes[bad].tolist()}")
    indices = multi_indices(dim, max_degree)
    coeffs = basis_matrix(indices, grid.nodes).T @ (grid.weights * vals)
    return ChaosFn(dim, max_degree, dict(zip(indices, coeffs)))
