"""Bernstein-polynomial trajectories: fitting, evaluation, and motion costs.

A trajectory is three independent degree-n polynomials (one per axis) in
Bernstein form over normalized time s = t / duration.  Fitting solves, per
axis, an equality-constrained least-squares problem: track the waypoints as
closely as possible while reproducing the six boundary conditions (position,
velocity, acceleration at both ends) exactly.  The KKT system

    [ P'P  A' ] [ c ]   [ P'x ]
    [ A    0  ] [ l ] = [ b   ]

is dense and tiny (degree+7 square), so it is solved directly with LU.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np

from .errors import (
    ContractViolationError,
    DegenerateFitError,
    DomainError,
    InvalidSpecError,
)

DEFAULT_DEGREE = 10
LIMIT_SAMPLES = 50

# 6 boundary rows; a trajectory of lower degree cannot satisfy them all
MIN_DEGREE = 5

# condition-number bands for the KKT solve: warn when ill-conditioned,
# refuse when the solution would be numerically meaningless
KKT_COND_WARN = 1e10
KKT_COND_SINGULAR = 1e14


@dataclass(frozen=True)
class BasisMatrices:
    """Bernstein basis rows and time derivatives at fixed sample times.

    Rows of ``p`` form a partition of unity; rows of ``pdot`` and ``pddot``
    sum to zero because they differentiate a constant.
    """

    p: np.ndarray
    pdot: np.ndarray
    pddot: np.ndarray
    times: np.ndarray
    duration: float


@dataclass(frozen=True)
class TrajectoryCoefficients:
    cx: np.ndarray
    cy: np.ndarray
    cz: np.ndarray
    degree: int
    duration: float

    def __post_init__(self):
        if self.degree < MIN_DEGREE:
            raise InvalidSpecError(f"degree must be >= {MIN_DEGREE}")
        if self.duration <= 0:
            raise InvalidSpecError("duration must be positive")
        for name in ("cx", "cy", "cz"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (self.degree + 1,):
                raise ContractViolationError(
                    f"{name} must have length degree+1 = {self.degree + 1}"
                )
            if not np.all(np.isfinite(v)):
                raise ContractViolationError(f"{name} must be finite")
            object.__setattr__(self, name, v)

    def stacked(self) -> np.ndarray:
        """Coefficients as a (degree+1, 3) column-per-axis matrix."""
        return np.stack([self.cx, self.cy, self.cz], axis=1)


@dataclass(frozen=True)
class BoundaryConditions:
    start_pos: np.ndarray
    start_vel: np.ndarray
    start_acc: np.ndarray
    end_pos: np.ndarray
    end_vel: np.ndarray
    end_acc: np.ndarray

    def __post_init__(self):
        for name in (
            "start_pos",
            "start_vel",
            "start_acc",
            "end_pos",
            "end_vel",
            "end_acc",
        ):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ContractViolationError(f"{name} must be a finite 3-vector")
            object.__setattr__(self, name, v)

    @staticmethod
    def at_rest(start_pos, end_pos) -> "BoundaryConditions":
        """Rest-to-rest boundary: zero velocity and acceleration at both ends."""
        z = np.zeros(3)
        return BoundaryConditions(start_pos, z, z, end_pos, z.copy(), z.copy())


@dataclass(frozen=True)
class LimitSpec:
    v_max: float
    a_min: float
    a_max: float

    def __post_init__(self):
        if self.v_max <= 0:
            raise InvalidSpecError("v_max must be positive")
        if not self.a_min < self.a_max:
            raise InvalidSpecError("need a_min < a_max")


def bernstein_basis(degree: int, t: float) -> np.ndarray:
    """Bernstein basis values C(n,i) t^i (1-t)^(n-i) at normalized time t."""
    if degree < 0:
        raise InvalidSpecError("degree must be non-negative")
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"normalized time {t} outside [0, 1]")
    return _bernstein_rows(degree, np.array([float(t)]))[0]


def _bernstein_rows(degree: int, s: np.ndarray) -> np.ndarray:
    """Basis rows at normalized times s, one column per coefficient."""
    s = np.asarray(s, dtype=float)
    out = np.empty((s.size, degree + 1))
    for i in range(degree + 1):
        out[:, i] = comb(degree, i) * s**i * (1.0 - s) ** (degree - i)
    return out


@lru_cache(maxsize=256)
def _derivative_transform(degree: int, order: int) -> np.ndarray:
    """Matrix D with d^k/ds^k rows of degree n = (degree-k basis rows) @ D.

    Repeated application of d/ds b_i^n = n (b_{i-1}^{n-1} - b_i^{n-1}) gives
    d^k/ds^k b_i^n = n!/(n-k)! * sum_j (-1)^j C(k,j) b_{i-k+j}^{n-k}.
    """
    falling = 1.0
    for j in range(order):
        falling *= degree - j
    d = np.zeros((degree - order + 1, degree + 1))
    for i in range(degree + 1):
        for j in range(order + 1):
            r = i - order + j
            if 0 <= r <= degree - order:
                d[r, i] += falling * (-1) ** j * comb(order, j)
    d.setflags(write=False)
    return d


def derivative_rows(
    degree: int, times: np.ndarray, duration: float, order: int
) -> np.ndarray:
    """Rows of the order-th time derivative of the basis at the given times."""
    if order < 0 or order > degree:
        raise InvalidSpecError(f"derivative order {order} outside [0, {degree}]")
    s = np.asarray(times, dtype=float) / duration
    if order == 0:
        return _bernstein_rows(degree, s)
    rows = _bernstein_rows(degree - order, s) @ _derivative_transform(degree, order)
    return rows / duration**order


def _validated_times(times, duration: float) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise InvalidSpecError("times must be a non-empty 1-D array")
    if np.any(np.diff(t) < 0):
        raise InvalidSpecError("times must be ascending")
    if t[0] < 0 or t[-1] > duration:
        raise DomainError(f"times must lie within [0, {duration}]")
    return t


@lru_cache(maxsize=64)
def _basis_cached(degree: int, duration: float, times: tuple) -> BasisMatrices:
    t = np.array(times)
    mats = [derivative_rows(degree, t, duration, k) for k in range(3)]
    for m in mats:
        m.setflags(write=False)
    t.setflags(write=False)
    return BasisMatrices(
        p=mats[0], pdot=mats[1], pddot=mats[2], times=t, duration=duration
    )


def build_basis_matrices(times, degree: int, duration: float) -> BasisMatrices:
    """Basis values and first two time derivatives at the sample times.

    Results are cached per (degree, duration, times); the returned arrays
    are shared across callers and therefore read-only.
    """
    if degree < 1:
        raise InvalidSpecError("degree must be >= 1")
    if duration <= 0:
        raise InvalidSpecError("duration must be positive")
    t = _validated_times(times, duration)
    return _basis_cached(int(degree), float(duration), tuple(float(x) for x in t))


def _boundary_rows(degree: int, duration: float) -> np.ndarray:
    """The six constraint rows: pos/vel/acc at t = 0 and t = duration."""
    ends = np.array([0.0, duration])
    rows = [derivative_rows(degree, ends, duration, k) for k in range(3)]
    return np.vstack([rows[0][0], rows[1][0], rows[2][0], rows[0][1], rows[1][1], rows[2][1]])


def fit_polynomial(
    waypoints,
    boundary: BoundaryConditions,
    duration: float,
    degree: int = DEFAULT_DEGREE,
    times=None,
) -> TrajectoryCoefficients:
    """Fit one polynomial per axis through the waypoints, boundary held exactly.

    Parameters
    ----------
    waypoints : (T, 3) array
        Positions to track in the least-squares sense, T >= 2.
    boundary : BoundaryConditions
        Position, velocity, and acceleration pinned at both endpoints.
    duration : float
        Total trajectory time in seconds.
    degree : int
        Polynomial degree, at least 5.
    times : optional 1-D array
        Sample time of each waypoint; defaults to uniform spacing over
        [0, duration] including both endpoints.

    Raises
    ------
    DegenerateFitError
        If the KKT system is singular or so ill-conditioned that the
        solution would be meaningless.  With uniform times this happens
        when there are fewer than five interior waypoints for the default
        degree; the two endpoint waypoints duplicate boundary rows.
    """
    w = np.asarray(waypoints, dtype=float)
    if w.ndim != 2 or w.shape[1] != 3 or w.shape[0] < 2:
        raise ContractViolationError("waypoints must be a (T, 3) array with T >= 2")
    if not np.all(np.isfinite(w)):
        raise ContractViolationError("waypoints must be finite")
    if degree < MIN_DEGREE:
        raise InvalidSpecError(f"degree must be >= {MIN_DEGREE}")
    if duration <= 0:
        raise InvalidSpecError("duration must be positive")
    if times is None:
        times = np.linspace(0.0, duration, w.shape[0])
    t = _validated_times(times, duration)
    if t.size != w.shape[0]:
        raise ContractViolationError("times must match the number of waypoints")

    p = derivative_rows(degree, t, duration, 0)
    a = _boundary_rows(degree, duration)
    m = degree + 1

    kkt = np.zeros((m + 6, m + 6))
    kkt[:m, :m] = p.T @ p
    kkt[:m, m:] = a.T
    kkt[m:, :m] = a

    cond = np.linalg.cond(kkt)
    if not np.isfinite(cond) or cond > KKT_COND_SINGULAR:
        raise DegenerateFitError(
            f"KKT system is singular or near-singular (cond ~ {cond:.2e}); "
            "add interior waypoints or lower the degree",
            condition=float(cond),
        )
    if cond > KKT_COND_WARN:
        warnings.warn(
            f"KKT system badly conditioned (cond ~ {cond:.2e}); "
            "fitted coefficients may lose precision",
            RuntimeWarning,
            stacklevel=2,
        )

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
    rhs = np.vstack([p.T @ w, b])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFitError(
            f"KKT solve failed: {exc}", condition=float(cond)
        ) from exc
    c = sol[:m]
    return TrajectoryCoefficients(
        cx=c[:, 0], cy=c[:, 1], cz=c[:, 2], degree=int(degree), duration=float(duration)
    )


def evaluate(coeffs: TrajectoryCoefficients, t: float):
    """Position, velocity, and acceleration 3-vectors at time t."""
    pos, vel, acc = evaluate_batch(coeffs, np.array([float(t)]))
    return pos[0], vel[0], acc[0]


def evaluate_batch(coeffs: TrajectoryCoefficients, times):
    """Vectorized evaluate: three (T, 3) arrays for position, velocity, acceleration."""
    t = np.asarray(times, dtype=float)
    if t.size and (t.min() < 0 or t.max() > coeffs.duration):
        raise DomainError(f"times must lie within [0, {coeffs.duration}]")
    c = coeffs.stacked()
    out = []
    for order in range(3):
        rows = derivative_rows(coeffs.degree, t, coeffs.duration, order)
        out.append(rows @ c)
    return tuple(out)


def smoothness_cost(coeffs: TrajectoryCoefficients) -> float:
    """Integral of squared jerk over the trajectory.

    Gauss-Legendre with degree-2 nodes integrates polynomials up to degree
    2*degree-5 exactly; the integrand has degree 2*degree-6.
    """
    nodes, weights = np.polynomial.legendre.leggauss(coeffs.degree - 2)
    t = 0.5 * coeffs.duration * (nodes + 1.0)
    w = 0.5 * coeffs.duration * weights
    jerk = derivative_rows(coeffs.degree, t, coeffs.duration, 3) @ coeffs.stacked()
    return float(w @ np.sum(jerk**2, axis=1))


def band_penalty(values, lo: float, hi: float) -> float:
    """Sum of max(0, (v-lo)(v-hi)): zero inside [lo, hi], quadratic outside."""
    v = np.asarray(values, dtype=float)
    return float(np.maximum(0.0, (v - lo) * (v - hi)).sum())


def limit_penalty(
    coeffs: TrajectoryCoefficients,
    limits: LimitSpec,
    n_samples: int = LIMIT_SAMPLES,
) -> float:
    """Rectified velocity and acceleration limit violations, sampled uniformly.

    Each axis is checked independently: acceleration against
    [a_min, a_max] and velocity against [-v_max, v_max].
    """
    if n_samples < 2:
        raise InvalidSpecError("n_samples must be >= 2")
    t = np.linspace(0.0, coeffs.duration, n_samples)
    _, vel, acc = evaluate_batch(coeffs, t)
    return band_penalty(acc, limits.a_min, limits.a_max) + band_penalty(
        vel, -limits.v_max, limits.v_max
    )


def sample_rows(coeffs: TrajectoryCoefficients, times) -> np.ndarray:
    """Plot-friendly (T, 10) array of t, position, velocity, acceleration."""
    t = np.asarray(times, dtype=float)
    pos, vel, acc = evaluate_batch(coeffs, t)
    return np.column_stack([t, pos, vel, acc])
