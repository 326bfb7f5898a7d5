"""Cross-entropy refinement of a fitted trajectory under the violation MMD.

The sampler works on the stacked coefficient vector [cx, cy, cz].  Every
draw is projected back onto the affine subspace satisfying the six boundary
rows per axis (the same rows the fitting KKT system enforces), so all
candidates stay valid endpoint-to-endpoint trajectories.  Candidate cost is
weighted smoothness plus limit penalties plus the summed violation MMD along
the trajectory, measured on the noisy field only; ground truth never enters.

The memory mechanism re-injects the best few elites verbatim into the next
iteration's pool.  Re-evaluating an identical coefficient vector reproduces
an identical cost (the per-voxel draws are frozen), which is what makes the
best-elite cost non-increasing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, InvalidSpecError, RefinementFailureError
from .mmdfield import MmdCostField
from .rng import stream
from .trajectory import (
    DEFAULT_DEGREE,
    BoundaryConditions,
    LimitSpec,
    TrajectoryCoefficients,
    _boundary_rows,
    evaluate_batch,
    fit_polynomial,
    limit_penalty,
    smoothness_cost,
)
from .world import inflated_bounds_mask

# cost charged per trajectory sample point that leaves the measured field;
# large enough to dominate any in-bounds cost, finite so pools stay rankable
OOB_PENALTY = 1e6


@dataclass(frozen=True)
class CemConfig:
    """Sampler shape, cost weights, and determinism seed for refinement."""

    n_samples: int = 50
    n_iterations: int = 5
    n_elite: int = 10
    memory_fraction: float = 0.3
    w_mmd: float = 100.0
    t_eval: int = 40
    seed: int = 0
    lambda_smooth: float = 1.0
    lambda_limit: float = 1.0
    sigma_min: float = 1e-4
    sigma0_scale: float = 0.3
    limits: LimitSpec | None = None

    def __post_init__(self):
        if self.n_samples < 2:
            raise InvalidSpecError("n_samples must be >= 2")
        if not 1 <= self.n_elite <= self.n_samples:
            raise InvalidSpecError("need 1 <= n_elite <= n_samples")
        if not 0.0 <= self.memory_fraction < 1.0:
            raise InvalidSpecError("memory_fraction must lie in [0, 1)")
        if self.n_iterations < 1:
            raise InvalidSpecError("n_iterations must be >= 1")
        if self.w_mmd < 0:
            raise InvalidSpecError("w_mmd must be non-negative")
        if self.t_eval < 2:
            raise InvalidSpecError("t_eval must be >= 2")
        if self.lambda_smooth < 0 or self.lambda_limit < 0:
            raise InvalidSpecError("cost weights must be non-negative")
        if self.sigma_min <= 0:
            raise InvalidSpecError("sigma_min must be positive")
        if self.sigma0_scale < 0:
            raise InvalidSpecError("sigma0_scale must be non-negative")


@dataclass
class CemState:
    """Sampling distribution and elite memory carried between iterations."""

    mu: np.ndarray
    sigma: np.ndarray
    memory: np.ndarray  # (k, dim) elite coefficient rows carried verbatim
    iteration: int


@dataclass(frozen=True)
class CostBreakdown:
    """Additive decomposition of a candidate's cost.

    total is exactly lambda_smooth*smoothness + lambda_limit*limit + w*mmd;
    out-of-bounds sample points are charged inside the mmd term so the
    identity survives and w keeps its meaning as the risk weight.
    """

    smoothness: float
    limit: float
    mmd: float
    total: float
    oob_points: int = 0


@dataclass(frozen=True)
class CemIterationStats:
    """One trace row: population statistics after an iteration's refit."""

    iteration: int
    mean_cost: float
    best_cost: float
    cov_trace: float
    mass_at_zero: float
    violations: np.ndarray


@dataclass(frozen=True)
class CemResult:
    coefficients: TrajectoryCoefficients  # final distribution mean
    trace: tuple[CemIterationStats, ...]
    best_cost: float
    best_coefficients: TrajectoryCoefficients


def total_cost(
    coeffs: TrajectoryCoefficients, cost_field: MmdCostField, config: CemConfig
) -> CostBreakdown:
    """Weighted smoothness + limit penalty + summed violation MMD.

    The MMD term sums the field's value at t_eval uniformly spaced points;
    points beyond the field's slack add OOB_PENALTY each instead of failing,
    so a wild sample stays comparable to its siblings.
    """
    s = smoothness_cost(coeffs)
    lim = (
        limit_penalty(coeffs, config.limits) if config.limits is not None else 0.0
    )
    times = np.linspace(0.0, coeffs.duration, config.t_eval)
    pos, _, _ = evaluate_batch(coeffs, times)
    values, ok = cost_field.batch_mmd(pos)
    oob = int(ok.size - np.count_nonzero(ok))
    mmd = float(values[ok].sum()) + OOB_PENALTY * oob
    total = config.lambda_smooth * s + config.lambda_limit * lim + config.w_mmd * mmd
    return CostBreakdown(
        smoothness=s, limit=lim, mmd=mmd, total=total, oob_points=oob
    )


def select_elites(costs, pool, q: int) -> np.ndarray:
    """Indices of the q cheapest pool members, ties broken by index."""
    costs = np.asarray(costs, dtype=float)
    if len(costs) != len(pool):
        raise ContractViolationError("costs and pool must have equal length")
    if not 1 <= q <= len(pool):
        raise ContractViolationError(f"need 1 <= q <= {len(pool)}, got {q}")
    return np.argsort(costs, kind="stable")[:q]


def update_samples(elites: np.ndarray, fraction: float, next_pool: np.ndarray) -> np.ndarray:
    """Append the top ceil(fraction * q) elite rows verbatim to the new pool.

    elites must already be cost-sorted (as select_elites returns them); the
    carried rows go after the fresh samples, so on exact cost ties a fresh
    sample wins the index tie-break.
    """
    k = math.ceil(fraction * len(elites))
    if k == 0:
        return next_pool
    return np.concatenate([next_pool, elites[:k]])


def refit_gaussian(elites: np.ndarray, sigma_min: float) -> tuple[np.ndarray, np.ndarray]:
    """Coordinatewise mean and population std of the elites, std floored."""
    elites = np.atleast_2d(np.asarray(elites, dtype=float))
    if elites.size == 0:
        raise ContractViolationError("elite set must be non-empty")
    mu = elites.mean(axis=0)
    sigma = np.maximum(elites.std(axis=0), sigma_min)
    return mu, sigma


def _flatten(coeffs: TrajectoryCoefficients) -> np.ndarray:
    return np.concatenate([coeffs.cx, coeffs.cy, coeffs.cz])


def _unflatten(flat: np.ndarray, degree: int, duration: float) -> TrajectoryCoefficients:
    m = degree + 1
    return TrajectoryCoefficients(
        cx=flat[:m], cy=flat[m : 2 * m], cz=flat[2 * m :],
        degree=degree, duration=duration,
    )


def project_to_boundary(flat: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Nearest coefficient rows (l2, per axis) satisfying the boundary rows.

    flat is (k, 3m) stacked [cx, cy, cz]; a the (6, m) boundary rows; b the
    (6, 3) boundary targets, one column per axis.  The correction solves the
    projection KKT system c = s - A'(AA')^-1 (As - b) blockwise.
    """
    flat = np.atleast_2d(np.asarray(flat, dtype=float))
    m = a.shape[1]
    if flat.shape[1] != 3 * m:
        raise ContractViolationError(
            f"expected stacked width {3 * m}, got {flat.shape[1]}"
        )
    gram = a @ a.T
    out = np.empty_like(flat)
    for axis in range(3):
        block = flat[:, axis * m : (axis + 1) * m]
        resid = block @ a.T - b[:, axis][None, :]
        lam = np.linalg.solve(gram, resid.T)
        out[:, axis * m : (axis + 1) * m] = block - lam.T @ a
    return out


def _mean_trajectory_violations(
    coeffs: TrajectoryCoefficients, cost_field: MmdCostField, t_eval: int
) -> np.ndarray:
    """All violation draws along the trajectory, for histogram traces."""
    times = np.linspace(0.0, coeffs.duration, t_eval)
    pos, _, _ = evaluate_batch(coeffs, times)
    ok = inflated_bounds_mask(cost_field.field, pos)
    if not np.any(ok):
        return np.empty(0)
    return np.concatenate([cost_field.violations_at(p) for p in pos[ok]])


def _stats_for(
    iteration: int,
    mean_cost: float,
    best_cost: float,
    sigma: np.ndarray,
    coeffs: TrajectoryCoefficients,
    cost_field: MmdCostField,
    t_eval: int,
) -> CemIterationStats:
    viol = _mean_trajectory_violations(coeffs, cost_field, t_eval)
    mass = float((viol == 0.0).mean()) if viol.size else 0.0
    return CemIterationStats(
        iteration=iteration,
        mean_cost=mean_cost,
        best_cost=best_cost,
        cov_trace=float(np.sum(sigma**2)),
        mass_at_zero=mass,
        violations=viol,
    )


def cem_refine(
    waypoints,
    boundary: BoundaryConditions,
    duration: float,
    cost_field: MmdCostField,
    config: CemConfig,
    degree: int = DEFAULT_DEGREE,
    times=None,
) -> CemResult:
    """Refine a waypoint path with cross-entropy search over coefficients.

    The initial distribution centers on the constrained least-squares fit of
    the waypoints; its spread is sigma0_scale times the largest coefficient
    magnitude, uniformly per coordinate.  Each iteration draws n_samples
    candidates (each from its own deterministic stream, so evaluation order
    cannot matter), projects them onto the boundary subspace, appends the
    remembered elites, scores the pool on the measured field, and refits.
    The result is the final mean; the cheapest candidate ever scored is
    logged alongside.

    Raises RefinementFailureError when an iteration has no candidate fully
    inside the measured field, with the trace collected so far attached.
    """
    fitted = fit_polynomial(waypoints, boundary, duration, degree=degree, times=times)
    a = _boundary_rows(fitted.degree, fitted.duration)
    b = np.vstack(
        [
            boundary.start_pos,
            boundary.start_vel,
            boundary.start_acc,
            boundary.end_pos,
            boundary.end_vel,
            boundary.end_acc,
        ]
    )
    mu = _flatten(fitted)
    scale = float(np.max(np.abs(mu)))
    sigma = np.full(mu.size, config.sigma0_scale * scale)

    base = total_cost(fitted, cost_field, config)
    trace = [
        _stats_for(0, base.total, base.total, sigma, fitted, cost_field, config.t_eval)
    ]
    if not np.any(sigma > 0.0):
        # degenerate sampling: every draw would equal the fit; skip the loop
        # so the output is the fitted input, bit for bit
        return CemResult(fitted, tuple(trace), base.total, fitted)

    state = CemState(mu=mu, sigma=sigma, memory=np.empty((0, mu.size)), iteration=0)
    best_flat, best_total = mu, base.total
    prev_elites = np.empty((0, mu.size))
    for it in range(1, config.n_iterations + 1):
        draws = np.stack(
            [
                state.mu
                + state.sigma
                * stream(config.seed, "cem-draw", it, j).normal(size=mu.size)
                for j in range(config.n_samples)
            ]
        )
        pool = update_samples(
            prev_elites, config.memory_fraction, project_to_boundary(draws, a, b)
        )
        breakdowns = [
            total_cost(_unflatten(row, fitted.degree, fitted.duration), cost_field, config)
            for row in pool
        ]
        costs = np.array([br.total for br in breakdowns])
        if min(br.oob_points for br in breakdowns) > 0:
            raise RefinementFailureError(
                f"iteration {it}: every candidate left the measured field",
                trace=tuple(trace),
            )
        idx = select_elites(costs, pool, config.n_elite)
        elites = pool[idx]
        if costs[idx[0]] < best_total:
            best_total = float(costs[idx[0]])
            best_flat = pool[idx[0]].copy()
        mu_next, sigma_next = refit_gaussian(elites, config.sigma_min)
        carry = math.ceil(config.memory_fraction * config.n_elite)
        prev_elites = elites
        state = CemState(
            mu=mu_next,
            sigma=sigma_next,
            memory=elites[:carry].copy(),
            iteration=it,
        )
        mean_coeffs = _unflatten(mu_next, fitted.degree, fitted.duration)
        trace.append(
            _stats_for(
                it,
                float(costs.mean()),
                float(costs[idx[0]]),
                sigma_next,
                mean_coeffs,
                cost_field,
                config.t_eval,
            )
        )
    return CemResult(
        coefficients=_unflatten(state.mu, fitted.degree, fitted.duration),
        trace=tuple(trace),
        best_cost=best_total,
        best_coefficients=_unflatten(best_flat, fitted.degree, fitted.duration),
    )
