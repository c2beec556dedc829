"""Gaussian mixture measures on R^n and their densities against the standard Gaussian.

Mixtures are closed under Ornstein-Uhlenbeck smoothing, mixing with the
reference Gaussian, and coordinate projection, so every measure appearing in
an experiment has a closed-form density ratio.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .chaos import ChaosFn, QuadratureGrid, as_points, project

__all__ = [
    "Component",
    "GaussianMixture",
    "DiscreteMeasure",
    "SingularCovarianceError",
    "MeasureSpecError",
    "standard_gaussian",
    "density_vs_mu",
    "ou_smooth_measure",
    "epsilon_mix",
    "project_measure",
    "conditional_expectation",
    "sample",
    "density_chaos",
    "difference_density",
    "load_measure",
    "measure_from_dict",
    "measure_to_dict",
]

WEIGHT_TOL = 1e-12
PSD_TOL = 1e-12


class SingularCovarianceError(ValueError):
    """A component covariance is not strictly positive definite."""


class MeasureSpecError(ValueError):
    """A measure specification is malformed; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True, eq=False)
class Component:
    weight: float
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Finite mixture ``sum_k w_k N(mean_k, cov_k)`` on R^dim.

    Covariances only need to be positive semidefinite; a zero covariance is a
    point mass.
    """

    dim: int
    components: tuple[Component, ...]

    def __post_init__(self):
        comps = []
        for k, c in enumerate(self.components):
            mean = np.asarray(c.mean, dtype=float).reshape(self.dim)
            cov = np.asarray(c.cov, dtype=float).reshape(self.dim, self.dim)
            if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
                raise MeasureSpecError(f"components[{k}]", "non-finite mean or covariance")
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise MeasureSpecError(f"components[{k}].cov", "covariance is not symmetric")
            if np.linalg.eigvalsh(cov).min() < -PSD_TOL:
                raise MeasureSpecError(f"components[{k}].cov", "covariance is not PSD")
            if not c.weight > 0:
                raise MeasureSpecError(f"components[{k}].weight", "weights must be positive")
            mean.setflags(write=False)
            cov.setflags(write=False)
            comps.append(Component(float(c.weight), mean, cov))
        if not comps:
            raise MeasureSpecError("components", "at least one component required")
        total = math.fsum(c.weight for c in comps)
        if abs(total - 1.0) > WEIGHT_TOL:
            raise MeasureSpecError("components", f"weights sum to {total!r}, not 1")
        object.__setattr__(self, "components", tuple(comps))

    @classmethod
    def single(cls, mean, cov) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float).reshape(mean.size, mean.size)
        return cls(mean.size, (Component(1.0, mean, cov),))

    @classmethod
    def from_parts(cls, weights, means, covs) -> "GaussianMixture":
        weights = np.asarray(weights, dtype=float)
        weights = weights / math.fsum(weights)
        means = [np.atleast_1d(np.asarray(m, dtype=float)) for m in means]
        dim = means[0].size
        comps = tuple(
            Component(w, m, np.asarray(c, dtype=float).reshape(dim, dim))
            for w, m, c in zip(weights, means, covs)
        )
        return cls(dim, comps)

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    def mean(self) -> np.ndarray:
        return sum(c.weight * c.mean for c in self.components)

    def translate(self, shift) -> "GaussianMixture":
        shift = np.asarray(shift, dtype=float).reshape(self.dim)
        return GaussianMixture(
            self.dim, tuple(Component(c.weight, c.mean + shift, c.cov) for c in self.components)
        )

    def l2_density(self) -> bool:
        """Whether the density against the standard Gaussian is square integrable.

        For a component ``N(m, S)`` this holds iff every eigenvalue of ``S`` is
        below 2.
        """
        return all(np.linalg.eigvalsh(c.cov).max() < 2.0 for c in self.components)


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted atoms; ``atoms`` has shape ``(N, dim)``."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if atoms.shape[0] != weights.shape[0]:
            raise ValueError("atoms and weights have different lengths")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
        if abs(math.fsum(weights) - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {math.fsum(weights)!r}, not 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, atoms) -> "DiscreteMeasure":
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        return cls(atoms, np.full(atoms.shape[0], 1.0 / atoms.shape[0]))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def __len__(self):
        return self.atoms.shape[0]


def standard_gaussian(dim: int) -> GaussianMixture:
    return GaussianMixture.single(np.zeros(dim), np.eye(dim))


def _log_gauss(pts: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        chol = None
    if chol is None or np.min(np.diag(chol)) <= 1e-12 * max(1.0, np.max(np.diag(chol))):
        raise SingularCovarianceError(
            "density against mu requires strictly positive definite covariances"
        )
    z = np.linalg.solve(chol, (pts - mean).T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (np.sum(z * z, axis=0) + logdet + pts.shape[1] * math.log(2 * math.pi))


def density_vs_mu(m: GaussianMixture, x):
    """Radon-Nikodym derivative of ``m`` with respect to the standard Gaussian.

    Accepts a single point or an ``(N, dim)`` array.

    Raises
    ------
    SingularCovarianceError
        If any component covariance is singular.
    """
    pts, single = as_points(x, m.dim)
    logs = np.stack(
        [math.log(c.weight) + _log_gauss(pts, c.mean, c.cov) for c in m.components]
    )
    log_ref = -0.5 * (np.sum(pts * pts, axis=1) + m.dim * math.log(2 * math.pi))
    vals = np.exp(logsumexp(logs, axis=0) - log_ref)
    return float(vals[0]) if single else vals


def ou_smooth_measure(m: GaussianMixture, t: float) -> GaussianMixture:
    """Image of ``m`` under ``x -> exp(-t) x + sqrt(1 - exp(-2t)) Y`` with ``Y ~ mu`` independent."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return m
    a = math.exp(-t)
    s = -math.expm1(-2.0 * t)
    eye = np.eye(m.dim)
    return GaussianMixture(
        m.dim,
        tuple(Component(c.weight, a * c.mean, a * a * c.cov + s * eye) for c in m.components),
    )


def epsilon_mix(m: GaussianMixture, eps: float) -> GaussianMixture:
    """``(m + eps * mu) / (1 + eps)``; the density ratio is then at least ``eps / (1 + eps)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    comps = [Component(c.weight / (1 + eps), c.mean, c.cov) for c in m.components]
    eye = np.eye(m.dim)
    for k, c in enumerate(comps):
        if not c.mean.any() and np.array_equal(c.cov, eye):
            comps[k] = Component(c.weight + eps / (1 + eps), c.mean, c.cov)
            break
    else:
        comps.append(Component(eps / (1 + eps), np.zeros(m.dim), eye))
    # renormalize against rounding in the division
    total = math.fsum(c.weight for c in comps)
    comps = [Component(c.weight / total, c.mean, c.cov) for c in comps]
    return GaussianMixture(m.dim, tuple(comps))


def project_measure(m: GaussianMixture, k: int) -> GaussianMixture:
    """Marginal of the first ``k`` coordinates."""
    if not 1 <= k <= m.dim:
        raise ValueError(f"k must lie in [1, {m.dim}]")
    return GaussianMixture(
        k, tuple(Component(c.weight, c.mean[:k], c.cov[:k, :k]) for c in m.components)
    )


def conditional_expectation(f: ChaosFn, k: int) -> ChaosFn:
    """Conditional expectation given the first ``k`` coordinates.

    Keeps exactly the coefficients whose multi-index vanishes on coordinates
    ``k+1..n``; the result still lives on R^n.
    """
    if not 0 <= k <= f.dim:
        raise ValueError(f"k must lie in [0, {f.dim}]")
    return ChaosFn(
        f.dim, f.max_degree, {b: v for b, v in f.coeffs.items() if not any(b[k:])}
    )


def restrict_to_leading(f: ChaosFn, k: int) -> ChaosFn:
    """View a function of the first ``k`` coordinates as a function on R^k."""
    if any(any(b[k:]) and v != 0.0 for b, v in f.coeffs.items()):
        raise ValueError(f"function depends on coordinates beyond the first {k}")
    return ChaosFn(k, f.max_degree, {b[:k]: v for b, v in f.coeffs.items() if not any(b[k:])})


def sample(m: GaussianMixture, count: int, seed) -> DiscreteMeasure:
    """``count`` iid draws with uniform weights.

    ``seed`` may be an int, a ``SeedSequence`` or a ``Generator``; draws are
    reproducible for a fixed seed. Components are chosen first, then one
    standard normal vector per draw is mapped through the component's
    covariance square root. Two mixtures with the same component count
    therefore receive coupled draws under the same seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = rng.choice(len(m.components), size=count, p=m.weights)
    z = rng.standard_normal((count, m.dim))
    out = np.empty((count, m.dim))
    for k, c in enumerate(m.components):
        sel = labels == k
        vals, vecs = np.linalg.eigh(c.cov)
        root = vecs * np.sqrt(np.clip(vals, 0.0, None))
        out[sel] = c.mean + z[sel] @ root.T
    return DiscreteMeasure.uniform(out)


def density_chaos(m: GaussianMixture, max_degree: int, grid: QuadratureGrid) -> ChaosFn:
    """Chaos projection of ``density_vs_mu(m, .)``."""
    return project(lambda x: density_vs_mu(m, x), m.dim, max_degree, grid)


def difference_density(
    nu0: GaussianMixture, nu1: GaussianMixture, max_degree: int, grid: QuadratureGrid
) -> tuple[ChaosFn, float]:
    """Chaos projection of ``d(nu1 - nu0)/dmu`` with the mean forced to zero.

    Returns the expansion and the magnitude of the removed mean coefficient
    (pure quadrature error for probability measures).
    """
    if nu0.dim != nu1.dim:
        raise ValueError("measures live in different dimensions")
    if not (nu0.l2_density() and nu1.l2_density()):
        raise ValueError("density against mu is not square integrable (covariance eigenvalue >= 2)")
    alpha = project(
        lambda x: density_vs_mu(nu1, x) - density_vs_mu(nu0, x), nu0.dim, max_degree, grid
    )
    return alpha.with_mean(0.0), abs(alpha.mean)


def measure_from_dict(spec: dict) -> GaussianMixture:
    """Build a mixture from the JSON layout ``{"dim", "components": [{"weight", "mean", "cov"}]}``."""
    if not isinstance(spec, dict):
        raise MeasureSpecError("<root>", "expected a JSON object")
    if "dim" not in spec:
        raise MeasureSpecError("dim", "missing")
    dim = spec["dim"]
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        raise MeasureSpecError("dim", f"must be a positive integer, got {dim!r}")
    raw = spec.get("components")
    if not isinstance(raw, list) or not raw:
        raise MeasureSpecError("components", "must be a non-empty list")
    comps = []
    for k, c in enumerate(raw):
        for key in ("weight", "mean", "cov"):
            if not isinstance(c, dict) or key not in c:
                raise MeasureSpecError(f"components[{k}].{key}", "missing")
        try:
            weight = float(c["weight"])
            mean = np.asarray(c["mean"], dtype=float)
            cov = np.asarray(c["cov"], dtype=float)
        except (TypeError, ValueError) as exc:
            raise MeasureSpecError(f"components[{k}]", f"non-numeric entry ({exc})") from None
        if mean.shape != (dim,):
            raise MeasureSpecError(f"components[{k}].mean", f"expected length {dim}")
        if cov.shape != (dim, dim):
            raise MeasureSpecError(f"components[{k}].cov", f"expected a {dim}x{dim} matrix")
        comps.append(Component(weight, mean, cov))
    return GaussianMixture(dim, tuple(comps))


def measure_to_dict(m: GaussianMixture) -> dict:
    return {
        "dim": m.dim,
        "components": [
            {"weight": c.weight, "mean": c.mean.tolist(), "cov": c.cov.tolist()}
            for c in m.components
        ],
    }


def load_measure(path) -> GaussianMixture:
    """Read and validate a measure-spec JSON file."""
    text = Path(path).read_text()
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MeasureSpecError("<root>", f"invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return measure_from_dict(spec)
