"""Kinodynamic A* over constant-acceleration primitives with risk-aware edges.

Each expansion applies every control from a per-axis grid for a fixed tau,
so nodes live on a tree of double-integrator states.  Edge cost is the
control effort plus a time charge, plus the difference in the point-wise
violation MMD between child and parent: edges that drift toward uncertain
obstacles pay, edges that retreat earn a (clamped) discount.

The heuristic is the free-time optimum of the same effort-plus-time
integrand for a continuous double integrator, found by minimizing

    J(T) = 12 gamma / T^3 - 12 beta / T^2 + 4 alpha / T + rho T

over the positive real roots of its stationarity quartic
rho T^4 - 4 alpha T^2 + 24 beta T - 36 gamma = 0, where gamma, beta, alpha
collect the boundary position and velocity mismatch.  A piecewise-constant
control achieving the same boundary states can never beat it, which is what
makes it admissible for exact goal states.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from heapq import heappop, heappush

import numpy as np

from .errors import InvalidQueryError, InvalidSpecError, OutOfBoundsError
from .mmdfield import MmdCostField
from .trajectory import BoundaryConditions, TrajectoryCoefficients, evaluate_batch, fit_polynomial
from .world import inflated_bounds_mask, query_distance, query_distance_batch

DEFAULT_TAU = 0.5
DEFAULT_RHO = 1.0

# tolerance for treating a complex quartic root as a usable real arrival time
_ROOT_IMAG_TOL = 1e-9


@dataclass(frozen=True)
class KinoState:
    """Double-integrator state: position (m) and velocity (m/s)."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        for name in ("position", "velocity"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise InvalidSpecError(f"{name} must be a finite 3-vector")
            object.__setattr__(self, name, v)

    @classmethod
    def _trusted(cls, position: np.ndarray, velocity: np.ndarray) -> "KinoState":
        # search-internal fast path: arrays are already float64 3-vectors
        # derived from validated states, so re-validation is pure overhead
        self = object.__new__(cls)
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "velocity", velocity)
        return self


@dataclass(frozen=True)
class MotionPrimitive:
    """Constant acceleration u applied for tau seconds."""

    u: np.ndarray
    tau: float

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        if u.shape != (3,) or not np.all(np.isfinite(u)):
            raise InvalidSpecError("u must be a finite 3-vector")
        if self.tau <= 0:
            raise InvalidSpecError("tau must be positive")
        object.__setattr__(self, "u", u)


@dataclass(frozen=True)
class SearchConfig:
    """Knobs for the primitive search.

    Sampling parameters (noise, kernel, draws per node) live on the
    MmdCostField; this config only decides how the search uses the values.
    ``hard_clearance`` rejects children whose measured distance falls below
    it, which is how the deterministic baseline consumes the noisy map.
    Feasibility (in-bounds, positive distance, hard clearance) is enforced
    at ``arc_check_samples`` interior points of each primitive arc as well
    as at its endpoint: nodes can sit in free voxels while the swept arc
    between them clips an obstacle.  When the risk term is active the same
    interior points are also held to a swept chance constraint: a point
    whose modeled violation probability (noise cdf at the measured reading)
    exceeds ``arc_risk_cap`` kills the edge.  The edge cost only sees node
    risk, so without this gate a fast arc can straddle a thin high-risk
    sliver that both endpoints miss; gating on the model rather than the
    per-voxel draws keeps the search from favoring voxels whose frozen
    draws happen to look optimistic.  1.0 disables the gate.

    Retention cells combine a position voxel (``prune_resolution``) with a
    velocity cell.  ``velocity_prune_resolution`` defaults to the child
    velocity spacing u_max*tau/r, which de-duplicates exact repeat states
    while never merging distinct reachable velocities; coarser values trade
    path quality for speed.  ``inf`` collapses the velocity axis entirely
    (one node per position voxel), which empirically strands the search:
    the surviving node's velocity is usually a fast pass-through, dead ends
    accumulate, and constrained goals (rest-to-rest) become unreachable.
    """

    u_max: float
    r: int = 2
    tau: float = DEFAULT_TAU
    rho: float = DEFAULT_RHO
    prune_resolution: float = 0.5
    velocity_prune_resolution: float | None = None
    goal_tolerance: float = 0.5
    goal_velocity_tolerance: float | None = None
    max_expansions: int = 20000
    w_mmd: float = 0.0
    clamp_edge_cost: bool = True
    v_max: float | None = None
    hard_clearance: float | None = None
    direct_connect: bool = False
    direct_connect_threshold: float = 1e-3
    direct_connect_samples: int = 25
    direct_connect_interval: int = 20
    arc_check_samples: int = 4
    arc_risk_cap: float = 1.0

    def __post_init__(self):
        if self.u_max <= 0:
            raise InvalidSpecError("u_max must be positive")
        if self.r < 1:
            raise InvalidSpecError("r must be >= 1")
        if self.tau <= 0:
            raise InvalidSpecError("tau must be positive")
        if self.rho < 0:
            raise InvalidSpecError("rho must be non-negative")
        if self.prune_resolution <= 0 or self.goal_tolerance <= 0:
            raise InvalidSpecError("prune_resolution and goal_tolerance must be positive")
        if self.velocity_prune_resolution is not None and not (
            self.velocity_prune_resolution > 0
        ):
            raise InvalidSpecError("velocity_prune_resolution must be positive when set")
        if self.max_expansions < 1:
            raise InvalidSpecError("max_expansions must be >= 1")
        if self.w_mmd < 0:
            raise InvalidSpecError("w_mmd must be non-negative")
        if self.direct_connect_interval < 1:
            raise InvalidSpecError("direct_connect_interval must be >= 1")
        if self.arc_check_samples < 0:
            raise InvalidSpecError("arc_check_samples must be >= 0")
        if not 0.0 < self.arc_risk_cap <= 1.0:
            raise InvalidSpecError("arc_risk_cap must be in (0, 1]")


@dataclass
class SearchResult:
    found: bool
    reason: str
    states: list[KinoState]
    primitives: list[MotionPrimitive]
    cost: float
    expansions: int
    path_mmd: np.ndarray
    trace: np.ndarray  # one row per expansion: x, y, z, f, g, h, M
    connect: TrajectoryCoefficients | None = None


TRACE_COLUMNS = ("x", "y", "z", "f", "g", "h", "mmd")


def generate_controls(u_max: float, r: int) -> np.ndarray:
    """All (2r+1)^3 accelerations with per-axis values k*u_max/r, k in [-r, r]."""
    if u_max <= 0:
        raise InvalidSpecError("u_max must be positive")
    if r < 1:
        raise InvalidSpecError("r must be >= 1")
    axis = np.array([k * u_max / r for k in range(-r, r + 1)])
    grid = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def propagate(state: KinoState, prim: MotionPrimitive) -> KinoState:
    """Closed-form constant-acceleration update over one primitive."""
    tau = prim.tau
    return KinoState(
        position=state.position + state.velocity * tau + 0.5 * prim.u * tau**2,
        velocity=state.velocity + prim.u * tau,
    )


def edge_cost(
    prim: MotionPrimitive,
    rho: float,
    delta_m: float,
    w_mmd: float,
    clamp: bool = True,
) -> float:
    """(||u||^2 + rho) tau + w_mmd * delta_m, optionally clamped at zero.

    delta_m can be negative when the child is safer than the parent; the
    clamp keeps edge costs non-negative so the A* ordering stays sound.
    The effort term reduces with np.sum, not a BLAS dot, so the value is
    bitwise identical to the vectorized expansion inside search().
    """
    base = (float(np.sum(prim.u * prim.u)) + rho) * prim.tau + w_mmd * delta_m
    return max(0.0, base) if clamp else base


def _arrival_terms(positions, velocities, goal: KinoState):
    d = goal.position[None, :] - np.atleast_2d(positions)
    v0 = np.atleast_2d(velocities)
    vg = goal.velocity
    gamma = np.sum(d * d, axis=1)
    beta = np.sum(d * (v0 + vg[None, :]), axis=1)
    alpha = np.sum(v0 * v0, axis=1) + v0 @ vg + float(vg @ vg)
    return gamma, beta, alpha


def _batch_arrival(positions, velocities, goal: KinoState, rho: float):
    """Vectorized free-time optimum: (costs, arrival times) for B states.

    The stationarity quartics are solved together as eigenvalues of their
    stacked companion matrices.
    """
    gamma, beta, alpha = _arrival_terms(positions, velocities, goal)
    b = gamma.shape[0]
    costs = np.zeros(b)
    times = np.full(b, np.inf)
    if rho == 0.0:
        # the infimum is 0, approached as arrival time grows without bound
        return costs, times
    exact = (gamma == 0.0) & np.all(
        np.atleast_2d(velocities) == goal.velocity[None, :], axis=1
    )
    times[exact] = 0.0
    todo = ~exact
    if not np.any(todo):
        return costs, times
    companion = np.zeros((int(todo.sum()), 4, 4))
    companion[:, 1, 0] = 1.0
    companion[:, 2, 1] = 1.0
    companion[:, 3, 2] = 1.0
    companion[:, 0, 3] = 36.0 * gamma[todo] / rho
    companion[:, 1, 3] = -24.0 * beta[todo] / rho
    companion[:, 2, 3] = 4.0 * alpha[todo] / rho
    roots = np.linalg.eigvals(companion)
    valid = (np.abs(roots.imag) <= _ROOT_IMAG_TOL) & (roots.real > 1e-12)
    t = np.where(valid, roots.real, 1.0)
    j = (
        12.0 * gamma[todo, None] / t**3
        - 12.0 * beta[todo, None] / t**2
        + 4.0 * alpha[todo, None] / t
        + rho * t
    )
    j = np.where(valid, j, np.inf)
    best = np.argmin(j, axis=1)
    rows = np.arange(len(best))
    best_cost = j[rows, best]
    best_t = t[rows, best]
    # no usable real root means the stationary points collapsed numerically;
    # 0 is always admissible
    usable = np.isfinite(best_cost)
    costs[todo] = np.where(usable, np.maximum(best_cost, 0.0), 0.0)
    times[todo] = np.where(usable, best_t, np.inf)
    return costs, times


def optimal_arrival(state: KinoState, goal: KinoState, rho: float) -> tuple[float, float]:
    """(cost, arrival time) of the free-time continuous optimum.

    With rho = 0 the infimum is 0, approached as the arrival time grows
    without bound; (0, inf) is returned to keep the value admissible.
    """
    costs, times = _batch_arrival(
        state.position[None, :], state.velocity[None, :], goal, rho
    )
    return float(costs[0]), float(times[0])


def heuristic(state: KinoState, goal: KinoState, rho: float) -> float:
    return optimal_arrival(state, goal, rho)[0]


def node_mmd(state: KinoState, cost_field: MmdCostField) -> float:
    """Violation MMD of the field at the node's position."""
    return cost_field.point_mmd(state.position)


class _Node:
    __slots__ = ("state", "g", "h", "m", "parent", "prim")

    def __init__(self, state, g, h, m, parent, prim):
        self.state = state
        self.g = g
        self.h = h
        self.m = m
        self.parent = parent
        self.prim = prim


def keeps_incumbent(
    incumbent_g: float, incumbent_m: float, new_g: float, new_m: float
) -> bool:
    """Voxel retention rule: lower g wins, then lower M, then first arrival."""
    if new_g != incumbent_g:
        return new_g > incumbent_g
    if new_m != incumbent_m:
        return new_m > incumbent_m
    return True


def _reached(state: KinoState, goal: KinoState, config: SearchConfig) -> bool:
    if float(np.linalg.norm(state.position - goal.position)) > config.goal_tolerance:
        return False
    if config.goal_velocity_tolerance is None:
        return True
    return (
        float(np.linalg.norm(state.velocity - goal.velocity))
        <= config.goal_velocity_tolerance
    )


def _direct_probe(
    node: _Node, goal: KinoState, cost_field: MmdCostField, config: SearchConfig
):
    """Minimum-jerk quintic to the goal, accepted if sampled risk stays low.

    The gate mirrors the search's own safety model: an MMD-weighted search
    requires the sampled MMD below the connect threshold everywhere, a
    deterministic one only its hard clearance.
    """
    _, t_star = optimal_arrival(node.state, goal, config.rho)
    if not np.isfinite(t_star) or t_star <= 0.0:
        return None
    zero = np.zeros(3)
    bc = BoundaryConditions(
        node.state.position, node.state.velocity, zero,
        goal.position, goal.velocity, zero,
    )
    waypoints = np.vstack([node.state.position, goal.position])
    coeffs = fit_polynomial(waypoints, bc, t_star, degree=5)
    samples = np.linspace(0.0, t_star, config.direct_connect_samples)
    pos, vel, acc = evaluate_batch(coeffs, samples)
    if np.abs(acc).max() > config.u_max:
        return None
    if config.v_max is not None and np.abs(vel).max() > config.v_max:
        return None
    try:
        d = query_distance_batch(cost_field.field, pos)
    except OutOfBoundsError:
        return None
    if np.any(d <= 0.0):
        return None
    if config.hard_clearance is not None and np.any(d < config.hard_clearance):
        return None
    if config.w_mmd != 0.0:
        values, answerable = cost_field.batch_mmd(pos)
        if not np.all(answerable) or np.any(values >= config.direct_connect_threshold):
            return None
    return coeffs


def search(
    start: KinoState,
    goal: KinoState,
    cost_field: MmdCostField,
    config: SearchConfig,
) -> SearchResult:
    """Best-first primitive search from start toward goal.

    Returns a found path or a failure report; raises InvalidQueryError only
    when start or goal sits inside a measured obstacle.  At most one node is
    retained per retention cell, a position voxel crossed with a velocity
    cell (see keeps_incumbent); a replaced node left on the heap is skipped
    lazily when popped.
    """
    field = cost_field.field
    if query_distance(field, start.position) <= 0.0:
        raise InvalidQueryError("start position is inside a measured obstacle")
    if query_distance(field, goal.position) <= 0.0:
        raise InvalidQueryError("goal position is inside a measured obstacle")

    controls = generate_controls(config.u_max, config.r)
    tau = config.tau
    effort = (np.sum(controls * controls, axis=1) + config.rho) * tau
    prims = [MotionPrimitive(u, tau) for u in controls]
    use_mmd = config.w_mmd != 0.0

    vres = config.velocity_prune_resolution
    if vres is None:
        vres = config.u_max * config.tau / config.r

    def cell(state: KinoState) -> tuple[int, ...]:
        idx = np.floor((state.position - field.origin) / config.prune_resolution)
        vidx = np.floor(state.velocity / vres)
        return (
            int(idx[0]), int(idx[1]), int(idx[2]),
            int(vidx[0]), int(vidx[1]), int(vidx[2]),
        )

    m0 = cost_field.point_mmd(start.position) if use_mmd else 0.0
    root = _Node(start, 0.0, heuristic(start, goal, config.rho), m0, None, None)
    counter = itertools.count()
    heap = [(root.g + root.h, next(counter), root)]
    retained: dict[tuple[int, ...], _Node] = {cell(start): root}
    expansions = 0
    trace: list[tuple] = []

    def finish(found, reason, node, connect=None) -> SearchResult:
        states, prims, mmds = [], [], []
        cursor = node
        while cursor is not None:
            states.append(cursor.state)
            mmds.append(cursor.m)
            if cursor.prim is not None:
                prims.append(cursor.prim)
            cursor = cursor.parent
        states.reverse()
        prims.reverse()
        mmds.reverse()
        return SearchResult(
            found=found,
            reason=reason,
            states=states,
            primitives=prims,
            cost=node.g,
            expansions=expansions,
            path_mmd=np.array(mmds),
            trace=np.array(trace).reshape(-1, len(TRACE_COLUMNS)),
            connect=connect,
        )

    last = root
    pops = 0
    while heap:
        _, _, node = heappop(heap)
        if retained.get(cell(node.state)) is not node:
            continue  # replaced by a better node in the same cell
        last = node
        if _reached(node.state, goal, config):
            return finish(True, "goal", node)
        if config.direct_connect and pops % config.direct_connect_interval == 0:
            connect = _direct_probe(node, goal, cost_field, config)
            if connect is not None:
                return finish(True, "direct-connect", node, connect)
        pops += 1
        if expansions >= config.max_expansions:
            return finish(False, "max-expansions", node)
        expansions += 1
        trace.append(
            (*node.state.position, node.g + node.h, node.g, node.h, node.m)
        )

        # expand all controls at once; per-child work shrinks at each filter
        child_pos = (
            node.state.position
            + node.state.velocity * tau
            + 0.5 * controls * tau**2
        )
        child_vel = node.state.velocity + controls * tau
        keep = inflated_bounds_mask(field, child_pos)
        if config.v_max is not None:
            keep &= np.abs(child_vel).max(axis=1) <= config.v_max
        d = np.zeros(len(controls))
        if np.any(keep):
            d[keep] = query_distance_batch(field, child_pos[keep])
        keep &= d > 0.0
        if config.hard_clearance is not None:
            keep &= d >= config.hard_clearance
        if config.arc_check_samples > 0 and np.any(keep):
            # sweep the arc interior: nodes can be free while the arc clips
            ts = tau * np.arange(1, config.arc_check_samples + 1) / (
                config.arc_check_samples + 1
            )
            rows = np.flatnonzero(keep)
            arc = (
                node.state.position
                + node.state.velocity * ts[None, :, None]
                + 0.5 * controls[rows, None, :] * ts[None, :, None] ** 2
            ).reshape(-1, 3)
            arc_ok = inflated_bounds_mask(field, arc)
            arc_d = np.full(len(arc), -1.0)
            if np.any(arc_ok):
                arc_d[arc_ok] = query_distance_batch(field, arc[arc_ok])
            floor = 0.0 if config.hard_clearance is None else config.hard_clearance
            good = (arc_d > 0.0) & (arc_d >= floor)
            row_ok = good.reshape(len(rows), -1).all(axis=1)
            if use_mmd and config.arc_risk_cap < 1.0:
                # node risk never sees the arc interior; hold the sweep to
                # the modeled violation probability instead
                p_viol = cost_field.noise.cdf(cost_field.r_safe - arc_d)
                row_ok &= ~(
                    (p_viol > config.arc_risk_cap)
                    .reshape(len(rows), -1)
                    .any(axis=1)
                )
            keep[rows] = row_ok
        m = np.zeros(len(controls))
        if use_mmd and np.any(keep):
            m[keep] = cost_field.batch_mmd(child_pos[keep])[0]
        # ops mirror edge_cost() exactly so path g equals the edge-cost sum
        edge = effort + config.w_mmd * (m - node.m)
        if config.clamp_edge_cost:
            edge = np.maximum(0.0, edge)
        g = node.g + edge

        # vectorized retention keys; states are only materialized for
        # children that survive the incumbent check
        pos_cells = np.floor(
            (child_pos - field.origin) / config.prune_resolution
        ).astype(int)
        vel_cells = np.floor(child_vel / vres).astype(int)
        pending = []  # retained children; heuristics are batched afterwards
        for idx in np.flatnonzero(keep):
            key = (
                int(pos_cells[idx, 0]), int(pos_cells[idx, 1]), int(pos_cells[idx, 2]),
                int(vel_cells[idx, 0]), int(vel_cells[idx, 1]), int(vel_cells[idx, 2]),
            )
            incumbent = retained.get(key)
            if incumbent is not None and keeps_incumbent(
                incumbent.g, incumbent.m, g[idx], m[idx]
            ):
                continue
            # copies detach the rows from the big per-expansion arrays so
            # retained nodes don't pin them in memory
            child = _Node(
                KinoState._trusted(child_pos[idx].copy(), child_vel[idx].copy()),
                float(g[idx]),
                0.0,
                float(m[idx]),
                node,
                prims[idx],
            )
            retained[key] = child
            pending.append(child)
        if pending:
            h, _ = _batch_arrival(
                np.array([c.state.position for c in pending]),
                np.array([c.state.velocity for c in pending]),
                goal,
                config.rho,
            )
            for child, hc in zip(pending, h):
                child.h = float(hc)
                heappush(heap, (child.g + child.h, next(counter), child))
    return finish(False, "exhausted", last)
