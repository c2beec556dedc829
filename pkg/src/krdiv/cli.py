"""Command-line entry point ``krdiv``.

Every command writes one self-describing report. Each entry of ``checks`` has
``name``, ``value``, ``bound_or_reference``, ``tolerance``, ``relation`` and
``pass``. The exit status is 0 when every check passes, 1 when one fails and 2
for usage or input errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chaos import ChaosFn, MultiIndex, gauss_hermite_grid, multi_indices
from .flow import DensityFloorError, build_flow_config, run_flow
from .malliavin import (
    VectorField,
    derivative,
    divergence,
    field_inner_product,
    mehler_apply,
    min_norm_field,
    number_operator,
    ou_semigroup,
)
from .measures import (
    GaussianMixture,
    MeasureSpecError,
    difference_density,
    load_measure,
    measure_to_dict,
    sample,
)
from .minimizer import finite_dim_reduction_check, objective, theorem_gap
from .transport import (
    projected_w1_series,
    replicate_w1,
    smoothing_stability,
    w1_dual_lb,
    w1_exact_1d,
    w1_lp,
    w1_sliced_lb,
)

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
COMMANDS = ("verify-operators", "w1", "theorem", "flow", "projection")
STOCHASTIC = ("w1", "theorem", "flow", "projection")
OPERATOR_TOL = 1e-10
MEHLER_TOL = 1e-6
DUAL_GAP_TOL = 1e-6
DUAL_CHECK_ATOMS = 200
CORRUPTION = 1e-3


class UsageError(Exception):
    """Invalid configuration or unreadable input."""


@dataclass
class RunConfig:
    """Validated command-line configuration."""

    command: str
    spec0: str | None = None
    spec1: str | None = None
    dim: int | None = None
    degree: int | None = None
    nodes: int | None = None
    m: int = 8
    epsilon: float = 0.05
    t: float | None = None
    samples: int = 500
    reps: int = 20
    seed: int | None = None
    budget: int = 500
    tests: int = 4
    out: str | None = None
    format: str = "json"
    corrupt: str | None = None

    def validate(self) -> None:
        if self.command in STOCHASTIC and self.seed is None:
            raise UsageError(f"--seed is required for {self.command}")
        if self.command != "verify-operators" and not (self.spec0 and self.spec1):
            raise UsageError(f"{self.command} needs --spec0 and --spec1")
        ranges = {
            "dim": (self.dim, 1, 3),
            "degree": (self.degree, 0, 12),
            "nodes": (self.nodes, 2, 200),
            "m": (self.m, 1, 4096),
            "samples": (self.samples, 2, 5000),
            "reps": (self.reps, 2, 1000),
            "budget": (self.budget, 1, 100_000),
            "tests": (self.tests, 1, 100),
        }
        for name, (value, lo, hi) in ranges.items():
            if value is not None and not lo <= value <= hi:
                raise UsageError(f"--{name} must lie in [{lo}, {hi}], got {value}")
        if not 0 < self.epsilon <= 1:
            raise UsageError(f"--epsilon must lie in (0, 1], got {self.epsilon}")
        if self.t is not None and not 0 <= self.t <= 10:
            raise UsageError(f"--t must lie in [0, 10], got {self.t}")
        if self.seed is not None and self.seed < 0:
            raise UsageError("--seed must be non-negative")


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else str(x)


def check(name: str, value, bound, tolerance: float, passed: bool, relation: str) -> dict:
    return {
        "name": name,
        "value": _num(value),
        "bound_or_reference": _num(bound),
        "tolerance": _num(tolerance),
        "relation": relation,
        "pass": bool(passed),
    }


def _le(name, value, bound, tol) -> dict:
    return check(name, value, bound, tol, value <= bound + tol, "value <= bound + tolerance")


def _close(name, value, ref, tol) -> dict:
    return check(name, value, ref, tol, abs(value - ref) <= tol, "|value - reference| <= tolerance")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return _num(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _corrupt(f: ChaosFn, active: bool) -> ChaosFn:
    if not active:
        return f
    beta = max(f.coeffs, key=lambda b: (b.degree, b), default=MultiIndex.zero(f.dim))
    coeffs = dict(f.coeffs)
    coeffs[beta] = coeffs.get(beta, 0.0) + CORRUPTION
    return ChaosFn(f.dim, f.max_degree, coeffs)


def _random_chaos(rng, dim: int, degree: int) -> ChaosFn:
    return ChaosFn.from_vector(dim, degree, rng.standard_normal(len(multi_indices(dim, degree))))


def cmd_verify_operators(cfg: RunConfig) -> dict:
    n = cfg.dim or 2
    d = cfg.degree if cfg.degree is not None else 6
    q = cfg.nodes or 20
    rng = np.random.default_rng(cfg.seed or 0)
    count = 20
    errs = {"adjointness": 0.0, "id_equals_l": 0.0, "representation": 0.0, "contraction": -math.inf}
    for _ in range(count):
        f = _random_chaos(rng, n, d)
        u = VectorField(tuple(_random_chaos(rng, n, max(d - 1, 0)) for _ in range(n)))
        iu = _corrupt(divergence(u), cfg.corrupt == "adjointness")
        lhs = field_inner_product(u, derivative(f))
        rhs = sum(iu.coeffs.get(b, 0.0) * v for b, v in f.coeffs.items())
        errs["adjointness"] = max(errs["adjointness"], abs(lhs - rhs))
        idf = _corrupt(divergence(derivative(f)), cfg.corrupt == "id_equals_l")
        errs["id_equals_l"] = max(errs["id_equals_l"], idf.max_abs_diff(number_operator(f)))
        v = min_norm_field(f)
        iv = _corrupt(divergence(v), cfg.corrupt == "representation")
        errs["representation"] = max(errs["representation"], iv.max_abs_diff(f.with_mean(0.0)))
        # the corrupted variant drops the inverse of L, as a missing solve would
        w = derivative(f.with_mean(0.0)) if cfg.corrupt == "contraction" else v
        excess = w.norm() - f.with_mean(0.0).norm()
        errs["contraction"] = max(errs["contraction"], excess)
    checks = [
        _le("adjointness", errs["adjointness"], 0.0, OPERATOR_TOL),
        _le("id_equals_l", errs["id_equals_l"], 0.0, OPERATOR_TOL),
        _le("representation", errs["representation"], 0.0, OPERATOR_TOL),
        check("contraction", errs["contraction"], 0.0, OPERATOR_TOL,
              errs["contraction"] <= OPERATOR_TOL, "||v|| - ||alpha - E alpha|| <= tolerance"),
    ]
    notes = []
    if n <= 2:
        grid = gauss_hermite_grid(n, q)
        mehler_err, law_err = 0.0, 0.0
        for _ in range(3):
            f = _random_chaos(rng, n, d)
            for t in (0.05, 0.2, 1.0):
                quad = _corrupt(mehler_apply(f, t, grid), cfg.corrupt == "mehler")
                mehler_err = max(mehler_err, quad.max_abs_diff(ou_semigroup(f, t)))
            twice = mehler_apply(mehler_apply(f, 0.1, grid), 0.2, grid)
            law_err = max(law_err, twice.max_abs_diff(ou_semigroup(f, 0.3)))
        checks.append(_le("mehler_agreement", mehler_err, 0.0, MEHLER_TOL))
        checks.append(_le("semigroup_law", law_err, 0.0, MEHLER_TOL))
    else:
        notes.append("Mehler quadrature checks run for dim <= 2 only")
    return {"parameters": {"dim": n, "degree": d, "nodes": q, "functions": count}, "checks": checks,
            "notes": notes}


def _load_pair(cfg: RunConfig) -> tuple[GaussianMixture, GaussianMixture]:
    nu0, nu1 = load_measure(cfg.spec0), load_measure(cfg.spec1)
    if nu0.dim != nu1.dim:
        raise UsageError(f"spec dimensions differ: {nu0.dim} vs {nu1.dim}")
    if cfg.dim is not None and cfg.dim != nu0.dim:
        raise UsageError(f"--dim {cfg.dim} does not match spec dimension {nu0.dim}")
    return nu0, nu1


def cmd_w1(cfg: RunConfig) -> dict:
    nu0, nu1 = _load_pair(cfg)
    n = nu0.dim
    identical = measure_to_dict(nu0) == measure_to_dict(nu1)
    vals = replicate_w1(nu0, nu1, cfg.samples, cfg.reps, cfg.seed)
    lp_mean = float(vals.mean())
    lp_se = float(vals.std(ddof=1) / math.sqrt(len(vals)))
    checks, notes = [], []
    estimates = {"lp_samples": {"value": lp_mean, "stderr": lp_se, "kind": "estimate"}}
    if n == 1:
        exact = w1_exact_1d(nu0, nu1)
        estimates["cdf_exact"] = {"value": exact, "kind": "exact"}
        if identical:
            checks.append(_le("cdf_exact_zero", exact, 0.0, 1e-9))
        else:
            checks.append(_close("lp_vs_exact", lp_mean, exact, 3.0 * lp_se))
    else:
        lower, _ = w1_sliced_lb(nu0, nu1, seed=cfg.seed)
        estimates["sliced_lower"] = {"value": lower, "kind": "lower"}
        if identical:
            checks.append(_le("sliced_lower_zero", lower, 0.0, 1e-9))
        else:
            checks.append(_le("sliced_lower_le_lp", lower, lp_mean, 3.0 * lp_se))
    if identical:
        notes.append("identical inputs: sampled LP values reflect sampling bias only")

    atoms = min(cfg.samples, DUAL_CHECK_ATOMS)
    s0, s1 = np.random.SeedSequence(cfg.seed).spawn(2)
    a, b = sample(nu0, atoms, s0), sample(nu1, atoms, s1)
    primal = w1_lp(a, b).cost
    dual, _ = w1_dual_lb(a, b)
    checks.append(_close("lp_dual_gap", primal, dual, DUAL_GAP_TOL))

    degree = cfg.degree if cfg.degree is not None else (8 if n <= 2 else 4)
    try:
        grid = gauss_hermite_grid(n, cfg.nodes or (40 if n <= 2 else 16))
        alpha, _ = difference_density(nu0, nu1, degree, grid)
        upper = objective(min_norm_field(alpha))
        estimates["chaos_upper_v"] = {"value": upper, "kind": "upper (degree-truncated)",
                                      "degree": degree}
    except ValueError as exc:
        notes.append(f"chaos upper bound skipped: {exc}")
    if cfg.t is not None:
        st = smoothing_stability(nu0, nu1, cfg.t, degree=degree, samples=cfg.samples,
                                 reps=cfg.reps, seed=cfg.seed)
        checks.append(_le("smoothing_stability", st.measured, st.bound, 3.0 * st.stderr))
    return {"parameters": {"dim": n, "samples": cfg.samples, "reps": cfg.reps, "seed": cfg.seed,
                           "identical_inputs": identical},
            "estimates": estimates, "checks": checks, "notes": notes}


def cmd_theorem(cfg: RunConfig) -> dict:
    nu0, nu1 = _load_pair(cfg)
    degree = cfg.degree if cfg.degree is not None else 8
    rep = theorem_gap(
        nu0, nu1, degree, epsilon=cfg.epsilon, budget=cfg.budget, seed=cfg.seed,
        nodes_per_axis=cfg.nodes or 40, samples=min(cfg.samples, DUAL_CHECK_ATOMS),
        reps=min(cfg.reps, 5),
    )
    tol = rep.tolerance
    checks = [
        _le("lower_le_upper_min", rep.lower, rep.upper_min, tol),
        _le("upper_min_le_upper_v", rep.upper_min, rep.upper_v, 1e-12),
        _le("upper_min_le_upper_fu", rep.upper_min, rep.upper_fu, 1e-12),
        check("fu_ge_lower", rep.upper_fu, rep.lower, tol, rep.upper_fu >= rep.lower - tol,
              "value >= reference - tolerance"),
        _le("residual_small", rep.residual, 0.0, 1e-8),
    ]
    return {"parameters": {"degree": degree, "epsilon": cfg.epsilon, "budget": cfg.budget,
                           "seed": cfg.seed},
            "gap_report": rep.to_dict(), "checks": checks, "notes": []}


def cmd_flow(cfg: RunConfig) -> dict:
    nu0, nu1 = _load_pair(cfg)
    degree = cfg.degree if cfg.degree is not None else 8
    try:
        fc = build_flow_config(nu0, nu1, degree, m=cfg.m, epsilon=cfg.epsilon,
                               nodes_per_axis=cfg.nodes, n_test=cfg.tests, seed=cfg.seed)
    except DensityFloorError as exc:
        raise UsageError(str(exc)) from None
    checks, reports = [], []
    for i, f in enumerate(fc.test_fns):
        rep = run_flow(fc, f)
        doubled = run_flow(fc.with_steps(2 * cfg.m), f)
        reports.append(rep.to_dict())
        worst_move = max(s["move_cost"] - s["move_bound"] for s in rep.per_step)
        worst_taylor = max(s["taylor_err"] - s["taylor_bound"] for s in rep.per_step)
        checks += [
            _le(f"f{i}.divergence_residual", rep.divergence_residual, 0.0, 1e-8),
            _le(f"f{i}.move_excess", worst_move, 0.0, 1e-8),
            _le(f"f{i}.taylor_excess", worst_taylor, 0.0, rep.tolerance),
            _le(f"f{i}.total_gap", rep.total_gap, rep.combined_bound, rep.tolerance),
        ]
        ratio = rep.total_taylor / doubled.total_taylor if doubled.total_taylor > 0 else math.inf
        checks.append(check(f"f{i}.taylor_halving_ratio", ratio, 2.0, 0.2, abs(ratio - 2.0) <= 0.2,
                            "|value - reference| <= tolerance"))
    return {"parameters": {"degree": degree, "m": cfg.m, "epsilon": cfg.epsilon,
                           "tests": cfg.tests, "seed": cfg.seed},
            "flow_reports": reports, "checks": checks, "notes": []}


def cmd_projection(cfg: RunConfig) -> dict:
    nu0, nu1 = _load_pair(cfg)
    n = nu0.dim
    series = projected_w1_series(nu0, nu1, cfg.samples, cfg.reps, cfg.seed)
    means = series.mean(axis=0)
    checks = []
    for k in range(2, n + 1):
        diff = series[:, k - 1] - series[:, k - 2]
        se = float(diff.std(ddof=1) / math.sqrt(len(diff)))
        checks.append(check(f"w1_monotone_k{k}", means[k - 1], means[k - 2], 3.0 * se,
                            means[k - 1] >= means[k - 2] - 3.0 * se,
                            "value >= reference - tolerance"))
    degree = cfg.degree if cfg.degree is not None else (6 if n <= 2 else 4)
    nodes = cfg.nodes or (40 if n <= 2 else 16)
    notes = []
    reduction = []
    try:
        alpha, _ = difference_density(nu0, nu1, degree, gauss_hermite_grid(n, nodes))
    except ValueError as exc:
        alpha = None
        notes.append(f"reduction check skipped: {exc}")
    if alpha is not None:
        for k in range(1, n):
            rc = finite_dim_reduction_check(alpha, k, degree, nodes, cfg.budget)
            reduction.append({"k": k, **{key: _num(v) for key, v in vars(rc).items()}})
            checks.append(_close(f"reduction_equality_k{k}", rc.n_full_on_conditional,
                                 rc.n_marginal, rc.tolerance))
            checks.append(_le(f"reduction_le_full_k{k}", rc.n_full_on_conditional, rc.n_full,
                              rc.tolerance))
    return {"parameters": {"dim": n, "samples": cfg.samples, "reps": cfg.reps, "seed": cfg.seed,
                           "degree": degree, "nodes": nodes},
            "w1_by_k": [{"k": k + 1, "mean": float(means[k]),
                         "stderr": float(series[:, k].std(ddof=1) / math.sqrt(len(series)))}
                        for k in range(n)],
            "reduction": reduction, "checks": checks, "notes": notes}


HANDLERS = {
    "verify-operators": cmd_verify_operators,
    "w1": cmd_w1,
    "theorem": cmd_theorem,
    "flow": cmd_flow,
    "projection": cmd_projection,
}


def render(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(_jsonable(report), indent=2) + "\n"
    buf = io.StringIO()
    cols = ["name", "value", "bound_or_reference", "tolerance", "relation", "pass"]
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for row in report["checks"]:
        writer.writerow({c: row[c] for c in cols})
    return buf.getvalue()


def write_atomic(text: str, path: str) -> None:
    """Write ``text`` to ``path`` through a temporary file in the same directory."""
    target = Path(path)
    fd, tmp = tempfile.mkstemp(dir=target.parent if str(target.parent) else ".", prefix=".krdiv-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="krdiv", description="Transport distance verification suites.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--spec0", help="measure-spec JSON for the first measure")
    p.add_argument("--spec1", help="measure-spec JSON for the second measure")
    p.add_argument("--dim", type=int)
    p.add_argument("--degree", type=int)
    p.add_argument("--nodes", type=int, help="quadrature nodes per axis")
    p.add_argument("--m", type=int, default=8, help="flow steps")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--t", type=float, help="smoothing time for the stability check (w1)")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=int, default=500)
    p.add_argument("--tests", type=int, default=4, help="test functions (flow)")
    p.add_argument("--out", help="report path (default: stdout)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--corrupt", choices=("adjointness", "id_equals_l", "representation",
                                         "contraction", "mehler"),
                   help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    cfg = RunConfig(**vars(args))
    try:
        cfg.validate()
        report = HANDLERS[cfg.command](cfg)
    except UsageError as exc:
        print(f"krdiv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MeasureSpecError as exc:
        print(f"krdiv: error: invalid measure spec: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"krdiv: error: cannot read input: {exc.filename or ''} ({exc.strerror})",
              file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"krdiv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    passed = all(c["pass"] for c in report["checks"])
    full = {"command": cfg.command, **report, "passed": passed}
    text = render(full, cfg.format)
    try:
        if cfg.out:
            write_atomic(text, cfg.out)
        else:
            sys.stdout.write(text)
    except OSError as exc:
        print(f"krdiv: error: cannot write report: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE
    failed = [c["name"] for c in report["checks"] if not c["pass"]]
    if failed:
        print(f"krdiv: failed checks: {', '.join(failed)}", file=sys.stderr)
    return EXIT_OK if passed else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
