"""Discrete transport flow between two densities relative to the Gaussian.

Given densities ``alpha0, alpha1`` (with respect to the standard Gaussian) and
a field ``u`` with ``I u = alpha1 - alpha0``, the maps

    phi_k(x) = x + u(x) / (m * alpha_{k/m}(x)),    alpha_t = alpha0 + t (alpha1 - alpha0)

push ``alpha_{k/m} mu`` approximately onto ``alpha_{(k+1)/m} mu``. For a smooth
test function ``f`` each step splits into a first-order move and a Taylor
remainder; summing the steps bounds ``|int f d(nu1 - nu0)|`` by
``E|u| + C E|u|^2 / (m eps)``.

All expectations are quadrature sums over a fixed node set, weighted by the
density at the node.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .chaos import (
    ChaosFn,
    QuadratureGrid,
    SamplePoints,
    gauss_hermite_grid,
    monte_carlo_points,
    multi_indices,
)
from .malliavin import VectorField, divergence, min_norm_field, ou_semigroup
from .measures import GaussianMixture, density_chaos, epsilon_mix

__all__ = [
    "DensityFloorError",
    "FlowConfig",
    "StepErrors",
    "FlowReport",
    "build_flow_config",
    "interp_density",
    "flow_step",
    "step_error_pair",
    "run_flow",
    "random_test_functions",
    "hessian_bound",
    "taylor_convergence",
]

QUADRATURE_TOL = 1e-10


class DensityFloorError(ValueError):
    """An interpolated density fell below half the mixing floor at a working point."""


@dataclass(frozen=True)
class FlowConfig:
    """Inputs of the discrete flow.

    Attributes
    ----------
    m : int
        Number of steps.
    epsilon : float
        Mixing parameter; the exact densities are at least
        ``epsilon / (1 + epsilon)``.
    u : VectorField
        Solution of ``I u = alpha1 - alpha0``.
    alpha0, alpha1 : ChaosFn
        Densities of the end measures with respect to the Gaussian.
    test_fns : list of ChaosFn
        Smooth functions, 1-Lipschitz on ``box``.
    points : QuadratureGrid or SamplePoints
        Working node set for every expectation.
    box : tuple of ndarray
        Lower and upper corners of a box containing every node and every image
        ``phi_k(node)`` for step counts ``>= min_steps``.
    min_steps : int
        Smallest step count the box was sized for.
    """

    m: int
    epsilon: float
    u: VectorField
    alpha0: ChaosFn
    alpha1: ChaosFn
    test_fns: list
    points: QuadratureGrid | SamplePoints
    box: tuple
    min_steps: int

    @property
    def dim(self) -> int:
        return self.alpha0.dim

    @property
    def floor(self) -> float:
        return self.epsilon / (1.0 + self.epsilon)

    def with_steps(self, m: int) -> "FlowConfig":
        if m < self.min_steps:
            raise ValueError(f"m={m} is below min_steps={self.min_steps} used to size the box")
        return FlowConfig(
            m, self.epsilon, self.u, self.alpha0, self.alpha1, self.test_fns,
            self.points, self.box, self.min_steps,
        )


def interp_density(cfg: FlowConfig, t: float) -> ChaosFn:
    """Linear interpolation ``alpha0 + t (alpha1 - alpha0)``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    return cfg.alpha0 + t * (cfg.alpha1 - cfg.alpha0)


def _node_densities(cfg: FlowConfig, nodes: np.ndarray, k: int) -> np.ndarray:
    t = k / cfg.m
    a0 = cfg.alpha0.eval(nodes)
    a1 = cfg.alpha1.eval(nodes)
    return a0 + t * (a1 - a0)


def flow_step(cfg: FlowConfig, k: int, x) -> np.ndarray:
    """Apply ``phi_k`` to one point or a stack of points.

    Raises
    ------
    DensityFloorError
        If ``alpha_{k/m}`` is below half the floor at any input point.
    """
    if not 0 <= k < cfg.m:
        raise ValueError(f"k must lie in [0, {cfg.m - 1}]")
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, cfg.dim)
    dens = _node_densities(cfg, pts, k)
    low = dens < 0.5 * cfg.floor
    if np.any(low):
        raise DensityFloorError(
            f"density {dens[low].min():.3g} below half the floor {cfg.floor:.3g} "
            f"at {int(low.sum())} point(s) in step {k}"
        )
    out = pts + cfg.u.eval(pts) / (cfg.m * dens)[:, None]
    return out[0] if single else out


def _grid_axes(box: tuple, spacing: float) -> list[np.ndarray]:
    lo, hi = box
    return [np.linspace(a, b, max(int(math.ceil((b - a) / spacing)) + 1, 2)) for a, b in zip(lo, hi)]


def _dense_points(box: tuple, spacing: float) -> np.ndarray:
    axes = _grid_axes(box, spacing)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def _dense_spacing(dim: int) -> float:
    return 0.01 if dim == 1 else 0.05 if dim == 2 else 0.25


def gradient_bound(f: ChaosFn, box: tuple) -> float:
    """Max of ``|Df|`` over a dense grid on ``box``."""
    pts = _dense_points(box, _dense_spacing(f.dim))
    grads = np.stack([f.partial(i).eval(pts) for i in range(f.dim)], axis=1)
    return float(np.max(np.linalg.norm(grads, axis=1)))


def hessian_bound(f: ChaosFn, box: tuple) -> float:
    """Max of the Hessian operator norm of ``f`` over a dense grid on ``box``.

    Second derivatives come from exact differentiation of the expansion.
    """
    n = f.dim
    pts = _dense_points(box, _dense_spacing(n))
    first = [f.partial(i) for i in range(n)]
    hess = np.empty((len(pts), n, n))
    for i in range(n):
        for j in range(i, n):
            vals = first[i].partial(j).eval(pts)
            hess[:, i, j] = vals
            hess[:, j, i] = vals
    eig = np.linalg.eigvalsh(hess)
    return float(np.max(np.abs(eig)))


def random_test_functions(
    dim: int, count: int, box: tuple, seed=0, degree: int = 5, smoothing: float = 0.05
) -> list[ChaosFn]:
    """Smoothed random polynomials scaled to be 1-Lipschitz on ``box``.

    Each ``g`` has independent normal coefficients of degree ``1..degree``; the
    returned ``f`` is ``ou_semigroup(g, smoothing)`` divided by its maximal
    gradient norm on a dense grid over ``box``.
    """
    rng = np.random.default_rng(seed)
    indices = multi_indices(dim, degree)
    out = []
    for _ in range(count):
        coeffs = rng.standard_normal(len(indices))
        coeffs[0] = 0.0
        f = ou_semigroup(ChaosFn.from_vector(dim, degree, coeffs), smoothing)
        out.append(f / gradient_bound(f, box))
    return out


def _working_points(dim: int, nodes_per_axis: int, mc_points: int, seed):
    if dim <= 2:
        return gauss_hermite_grid(dim, nodes_per_axis)
    return monte_carlo_points(dim, mc_points, seed)


def build_flow_config(
    nu0: GaussianMixture,
    nu1: GaussianMixture,
    degree: int,
    *,
    m: int = 8,
    epsilon: float = 0.05,
    nodes_per_axis: int | None = None,
    n_test: int = 4,
    seed=0,
    min_steps: int | None = None,
    mc_points: int = 20_000,
) -> FlowConfig:
    """Mix both measures with the Gaussian, project their densities and solve ``I u``.

    Densities are projected to ``degree`` with their means pinned to one, and
    ``u = min_norm_field(alpha1 - alpha0)``. The test functions are normalized
    on a box covering the nodes and their images for ``min_steps`` (default
    ``m``) steps.

    The default node count (40 in one dimension, 12 in two) keeps the working
    nodes where truncated densities stay near their true values; larger
    tensor grids reach tails where a degree-8 truncation can turn negative.

    Raises
    ------
    DensityFloorError
        If a truncated density drops below half the floor at a working node.
    """
    if nu0.dim != nu1.dim:
        raise ValueError("measures live in different dimensions")
    if m < 1:
        raise ValueError("m must be at least 1")
    n = nu0.dim
    if nodes_per_axis is None:
        nodes_per_axis = 40 if n == 1 else 12
    mix0, mix1 = epsilon_mix(nu0, epsilon), epsilon_mix(nu1, epsilon)
    proj_grid = gauss_hermite_grid(n, max(nodes_per_axis, degree + 2) if n <= 2 else degree + 2)
    alpha0 = density_chaos(mix0, degree, proj_grid).with_mean(1.0)
    alpha1 = density_chaos(mix1, degree, proj_grid).with_mean(1.0)
    u = min_norm_field(alpha1 - alpha0)
    points = _working_points(n, nodes_per_axis, mc_points, seed)
    nodes = points.nodes

    floor = epsilon / (1.0 + epsilon)
    dens = np.minimum(alpha0.eval(nodes), alpha1.eval(nodes))
    low = dens < 0.5 * floor
    if np.any(low):
        raise DensityFloorError(
            f"truncated density reaches {dens.min():.3g} (< half the floor {floor:.3g}) "
            f"at {int(low.sum())} node(s); raise the degree or lower nodes_per_axis"
        )
    steps = m if min_steps is None else min_steps
    reach = np.linalg.norm(u.eval(nodes), axis=1) / (steps * dens)
    lo = nodes.min(axis=0) - reach.max()
    hi = nodes.max(axis=0) + reach.max()
    box = (lo, hi)
    tests = random_test_functions(n, n_test, box, seed=np.random.SeedSequence(seed).spawn(1)[0])
    return FlowConfig(m, epsilon, u, alpha0, alpha1, tests, points, box, steps)


@dataclass
class StepErrors:
    """Errors of one flow step for one test function, with their bounds."""

    k: int
    taylor_err: float
    taylor_bound: float
    move_cost: float
    move_bound: float
    stderr: float = 0.0


def _eff_floor(cfg: FlowConfig) -> float:
    nodes = cfg.points.nodes
    dens = np.minimum(cfg.alpha0.eval(nodes), cfg.alpha1.eval(nodes))
    return float(min(cfg.floor, dens.min()))


def _sample_stderr(points, values: np.ndarray) -> float:
    if not isinstance(points, SamplePoints) or points.exactness > 0 or len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


class _StepContext:
    """Node quantities shared by all steps and test functions of one run."""

    def __init__(self, cfg: FlowConfig):
        nodes = cfg.points.nodes
        self.cfg = cfg
        self.w = cfg.points.weights
        self.a0 = cfg.alpha0.eval(nodes)
        self.a1 = cfg.alpha1.eval(nodes)
        self.uvals = cfg.u.eval(nodes)
        self.abs_u = float(self.w @ np.linalg.norm(self.uvals, axis=1))
        self.sq_u = float(self.w @ np.sum(self.uvals**2, axis=1))
        self.eps = _eff_floor(cfg)
        self.mc = isinstance(cfg.points, SamplePoints)

    def density(self, k: int) -> np.ndarray:
        t = k / self.cfg.m
        return self.a0 + t * (self.a1 - self.a0)


def _step(ctx: _StepContext, k: int, f: ChaosFn, fx: np.ndarray, c: float) -> StepErrors:
    cfg = ctx.cfg
    nodes = cfg.points.nodes
    d_now, d_next = ctx.density(k), ctx.density(k + 1)
    moved = nodes + ctx.uvals / (cfg.m * d_now)[:, None]
    f_moved = f.eval(moved)
    pushed = ctx.w @ (d_now * f_moved)
    taylor_terms = d_now * f_moved - d_next * fx
    move_terms = d_now * (f_moved - fx)
    stderr = _sample_stderr(cfg.points, taylor_terms) if ctx.mc else 0.0
    return StepErrors(
        k=k,
        taylor_err=float(abs(pushed - ctx.w @ (d_next * fx))),
        taylor_bound=c / (cfg.m**2 * ctx.eps) * ctx.sq_u,
        move_cost=float(abs(ctx.w @ move_terms)),
        move_bound=ctx.abs_u / cfg.m,
        stderr=stderr,
    )


def step_error_pair(cfg: FlowConfig, k: int, f: ChaosFn, c: float | None = None) -> StepErrors:
    """Taylor remainder and first-order move of step ``k`` for test function ``f``.

    ``taylor_err = |E[alpha_{k/m} f(phi_k)] - E[alpha_{(k+1)/m} f]|`` with bound
    ``C E|u|^2 / (m^2 eps)``; ``move_cost = |E[alpha_{k/m} (f(phi_k) - f)]|``
    with bound ``E|u| / m``. ``C`` defaults to :func:`hessian_bound` on the
    config box and ``eps`` is the smaller of the floor and the least node
    density.
    """
    if not 0 <= k < cfg.m:
        raise ValueError(f"k must lie in [0, {cfg.m - 1}]")
    c = hessian_bound(f, cfg.box) if c is None else c
    ctx = _StepContext(cfg)
    flow_step(cfg, k, cfg.points.nodes)  # density guard
    return _step(ctx, k, f, f.eval(cfg.points.nodes), c)


@dataclass
class FlowReport:
    """Telescoped flow for one test function."""

    m: int
    epsilon: float
    E_abs_u: float
    E_sq_u: float
    C: float
    per_step: list
    total_gap: float
    combined_bound: float
    telescoped: float
    total_taylor: float
    divergence_residual: float
    eps_effective: float
    in_box: bool
    tolerance: float = QUADRATURE_TOL
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def run_flow(cfg: FlowConfig, f: ChaosFn) -> FlowReport:
    """Telescope all ``m`` steps for ``f`` and compare with the combined bound.

    ``total_gap = |E[alpha0 f] - E[alpha1 f]|`` must not exceed
    ``E|u| + C E|u|^2 / (m eps)`` plus :data:`QUADRATURE_TOL`; every step is
    checked against its own bounds as well.
    """
    ctx = _StepContext(cfg)
    nodes = cfg.points.nodes
    c = hessian_bound(f, cfg.box)
    fx = f.eval(nodes)
    lo, hi = cfg.box
    steps = []
    in_box = True
    for k in range(cfg.m):
        moved = flow_step(cfg, k, nodes)
        in_box &= bool(np.all(moved >= lo - 1e-12) and np.all(moved <= hi + 1e-12))
        steps.append(_step(ctx, k, f, fx, c))
    total_gap = float(abs(ctx.w @ ((ctx.a0 - ctx.a1) * fx)))
    taylor_total = math.fsum(s.taylor_err for s in steps)
    combined = ctx.abs_u + c / (cfg.m * ctx.eps) * ctx.sq_u
    tol = QUADRATURE_TOL + 3.0 * max((s.stderr for s in steps), default=0.0) * cfg.m
    residual = divergence(cfg.u).max_abs_diff(cfg.alpha1 - cfg.alpha0)
    checks = {
        "divergence_matches": residual < 1e-8,
        "images_in_box": in_box,
        "move_within_bound": all(s.move_cost <= s.move_bound + 1e-8 for s in steps),
        "taylor_within_bound": all(s.taylor_err <= s.taylor_bound + tol for s in steps),
        "gap_within_combined": total_gap <= combined + tol,
    }
    return FlowReport(
        m=cfg.m,
        epsilon=cfg.epsilon,
        E_abs_u=ctx.abs_u,
        E_sq_u=ctx.sq_u,
        C=c,
        per_step=[asdict(s) for s in steps],
        total_gap=total_gap,
        combined_bound=combined,
        telescoped=math.fsum(s.taylor_err + s.move_cost for s in steps),
        total_taylor=taylor_total,
        divergence_residual=residual,
        eps_effective=ctx.eps,
        in_box=in_box,
        tolerance=tol,
        checks=checks,
    )


def taylor_convergence(cfg: FlowConfig, ms=(8, 16, 32, 64)) -> dict:
    """Total Taylor remainder for each test function across step counts.

    Returns ``{"m": [...], "totals": [[...] per test fn], "ratios": [[...]]}``
    where ``ratios[i][j] = totals[i][j] / totals[i][j + 1]``.
    """
    ms = list(ms)
    totals = []
    for f in cfg.test_fns:
        totals.append([run_flow(cfg.with_steps(m), f).total_taylor for m in ms])
    ratios = [[row[j] / row[j + 1] if row[j + 1] > 0 else math.inf for j in range(len(ms) - 1)]
              for row in totals]
    return {"m": ms, "totals": totals, "ratios": ratios}
