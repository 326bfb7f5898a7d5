"""Kinodynamic primitive search: dynamics, heuristic, retention, gates."""
import itertools

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from mmdplan.errors import InvalidQueryError, InvalidSpecError
from mmdplan.frontend import (
    TRACE_COLUMNS,
    KinoState,
    MotionPrimitive,
    SearchConfig,
    edge_cost,
    generate_controls,
    heuristic,
    keeps_incumbent,
    node_mmd,
    optimal_arrival,
    propagate,
    search,
)
from mmdplan.mmdfield import MmdCostField
from mmdplan.rkhs import KernelSpec
from mmdplan.rng import stream
from mmdplan.trajectory import evaluate_batch
from mmdplan.uncertainty import NoiseModel
from mmdplan.world import Box, WorldSpec, compute_edt, generate_world

# ---------------------------------------------------------------------------
# Oracles.  Dynamics are checked against a fixed-step RK4 integrator (exact
# for constant acceleration up to roundoff), optimality against exhaustive
# enumeration of short control sequences, and the heuristic against the
# closed-form rest-to-rest minimum J(T) = 12 d^2 / T^3 + rho T plus a bounded
# scalar minimization of the same objective.
# ---------------------------------------------------------------------------


def rk4_endpoint(p0, v0, u, tau, steps=64):
    h = tau / steps
    p, v = np.asarray(p0, float).copy(), np.asarray(v0, float).copy()
    for _ in range(steps):
        k1p, k1v = v, u
        k2p, k2v = v + 0.5 * h * k1v, u
        k3p, k3v = v + 0.5 * h * k2v, u
        k4p, k4v = v + h * k3v, u
        p = p + h / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        v = v + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return p, v


def simulate_sequence(p0, v0, seq, tau, rho):
    """Plain per-axis arithmetic, no shared code with propagate/edge_cost."""
    p, v = list(p0), list(v0)
    cost = 0.0
    for u in seq:
        for a in range(3):
            p[a] = p[a] + v[a] * tau + 0.5 * u[a] * tau * tau
            v[a] = v[a] + u[a] * tau
        cost += (u[0] ** 2 + u[1] ** 2 + u[2] ** 2 + rho) * tau
    return p, v, cost


def rest_to_rest_bound(dist, rho):
    gamma = dist * dist
    t_star = (36.0 * gamma / rho) ** 0.25
    return 12.0 * gamma / t_star**3 + rho * t_star


def empty_field(extent, resolution, seed=0):
    spec = WorldSpec(
        archetype="custom", extent=extent, density=0.0, seed=seed, resolution=resolution
    )
    return compute_edt(generate_world(spec))


def make_cf(field, seed=0):
    return MmdCostField(
        field=field,
        noise=NoiseModel.gaussian(0.2),
        kernel=KernelSpec.rbf(0.15),
        n_samples=25,
        r_safe=0.3,
        seed=seed,
    )


@pytest.fixture(scope="module")
def open_cf():
    return make_cf(empty_field((8.0, 4.0, 4.0), 0.25))


@pytest.fixture(scope="module")
def window_field():
    # 0.4 m slab pierced by a 0.5 m spherical opening: passable, but every
    # crossing point measures well under r_safe + 2 sigma
    spec = WorldSpec(
        archetype="custom",
        extent=(6.0, 4.0, 4.0),
        density=0.0,
        seed=0,
        resolution=0.2,
        obstacles=(Box((2.8, 0.0, 0.0), (3.2, 4.0, 4.0)),),
        clear_spheres=(((3.0, 2.0, 2.0), 0.5),),
    )
    return compute_edt(generate_world(spec))


def rest(x, y, z):
    return KinoState(np.array([x, y, z], dtype=float), np.zeros(3))


class TestPrimitives:
    def test_control_grid_r2(self):
        c = generate_controls(2.0, 2)
        assert c.shape == (125, 3)
        assert len(np.unique(c, axis=0)) == 125
        assert set(np.unique(c)) == {-2.0, -1.0, 0.0, 1.0, 2.0}
        assert any(np.all(row == 0.0) for row in c)

    def test_control_grid_r1(self):
        c = generate_controls(1.5, 1)
        assert c.shape == (27, 3)
        assert set(np.unique(c)) == {-1.5, 0.0, 1.5}

    def test_control_grid_rejects_bad_args(self):
        with pytest.raises(InvalidSpecError):
            generate_controls(0.0, 2)
        with pytest.raises(InvalidSpecError):
            generate_controls(1.0, 0)

    def test_state_and_primitive_validation(self):
        with pytest.raises(InvalidSpecError):
            KinoState(np.zeros(2), np.zeros(3))
        with pytest.raises(InvalidSpecError):
            KinoState(np.array([0.0, np.nan, 0.0]), np.zeros(3))
        with pytest.raises(InvalidSpecError):
            MotionPrimitive(np.zeros(3), 0.0)
        with pytest.raises(InvalidSpecError):
            MotionPrimitive(np.array([1.0, np.inf, 0.0]), 0.5)

    def test_propagate_matches_rk4(self):
        rng = stream(13, "rk4-cases")
        for _ in range(50):
            p0 = rng.uniform(-5, 5, 3)
            v0 = rng.uniform(-3, 3, 3)
            u = rng.uniform(-4, 4, 3)
            tau = float(rng.uniform(0.1, 1.2))
            got = propagate(KinoState(p0, v0), MotionPrimitive(u, tau))
            p_ref, v_ref = rk4_endpoint(p0, v0, u, tau)
            np.testing.assert_allclose(got.position, p_ref, rtol=0, atol=1e-12)
            np.testing.assert_allclose(got.velocity, v_ref, rtol=0, atol=1e-12)

    def test_propagate_hand_example(self):
        s = propagate(
            KinoState(np.zeros(3), np.array([1.0, 0.0, 0.0])),
            MotionPrimitive(np.array([0.0, 2.0, 0.0]), 0.5),
        )
        assert np.array_equal(s.position, [0.5, 0.25, 0.0])
        assert np.array_equal(s.velocity, [1.0, 1.0, 0.0])


class TestEdgeCost:
    def test_coasting_pays_only_time(self):
        prim = MotionPrimitive(np.zeros(3), 0.5)
        assert edge_cost(prim, 1.0, 0.0, 0.0) == 0.5

    def test_effort_plus_time(self):
        prim = MotionPrimitive(np.array([2.0, 0.0, 0.0]), 0.5)
        assert edge_cost(prim, 2.0, 0.0, 0.0) == 3.0

    def test_risk_term_and_clamp(self):
        prim = MotionPrimitive(np.zeros(3), 0.5)
        assert edge_cost(prim, 1.0, 0.2, 10.0) == pytest.approx(2.5)
        assert edge_cost(prim, 1.0, -1.0, 10.0) == 0.0
        assert edge_cost(prim, 1.0, -1.0, 10.0, clamp=False) == pytest.approx(-9.5)

    def test_retention_ordering(self):
        assert keeps_incumbent(1.0, 5.0, 2.0, 0.0)  # cheaper g wins
        assert not keeps_incumbent(1.0, 5.0, 0.5, 9.0)
        assert keeps_incumbent(1.0, 0.1, 1.0, 0.2)  # g tied: lower M wins
        assert not keeps_incumbent(1.0, 0.2, 1.0, 0.1)
        assert keeps_incumbent(1.0, 0.1, 1.0, 0.1)  # full tie: first arrival


class TestHeuristic:
    def test_zero_at_goal(self):
        g = rest(1.0, 2.0, 3.0)
        cost, t = optimal_arrival(g, g, 2.0)
        assert cost == 0.0 and t == 0.0

    def test_rho_zero_infimum(self):
        cost, t = optimal_arrival(rest(0.0, 0.0, 0.0), rest(5.0, 0.0, 0.0), 0.0)
        assert cost == 0.0 and t == np.inf

    def test_rest_to_rest_closed_form(self):
        rng = stream(29, "h-cases")
        for _ in range(25):
            d = rng.uniform(0.3, 8.0, 3)
            rho = float(rng.uniform(0.5, 6.0))
            start = rest(0.0, 0.0, 0.0)
            goal = KinoState(d, np.zeros(3))
            dist = float(np.linalg.norm(d))
            expect = rest_to_rest_bound(dist, rho)
            numeric = minimize_scalar(
                lambda t: 12.0 * dist**2 / t**3 + rho * t,
                bounds=(1e-3, 60.0),
                method="bounded",
            ).fun
            assert expect == pytest.approx(numeric, abs=1e-7)
            assert heuristic(start, goal, rho) == pytest.approx(expect, abs=1e-9)

    def test_monotone_in_rho(self):
        start, goal = rest(0.0, 0.0, 0.0), rest(2.0, 1.0, 0.0)
        values = [heuristic(start, goal, rho) for rho in (0.5, 1.0, 2.0, 4.0)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_admissible_against_short_control_sequences(self):
        # any realizable piecewise-constant plan upper-bounds the free-time
        # continuous optimum, so h(start -> endpoint) can never exceed its cost
        rng = stream(41, "admissible")
        for _ in range(100):
            u_max = float(rng.uniform(0.5, 3.0))
            r = int(rng.integers(1, 3))
            tau = float(rng.uniform(0.2, 0.8))
            rho = float(rng.uniform(0.5, 4.0))
            controls = generate_controls(u_max, r)
            depth = int(rng.integers(1, 4))
            seq = [controls[rng.integers(0, len(controls))] for _ in range(depth)]
            p0 = rng.uniform(-2, 2, 3)
            v0 = rng.uniform(-1.5, 1.5, 3)
            p, v, cost = simulate_sequence(p0, v0, seq, tau, rho)
            start = KinoState(p0, v0)
            goal = KinoState(np.array(p), np.array(v))
            assert heuristic(start, goal, rho) <= cost + 1e-9


class TestSearchOptimality:
    def test_exact_optimum_on_enumerable_instance(self):
        # the instance is small enough to brute-force: with r=1 every plan of
        # depth <= 3 is enumerable, and deeper plans already pay more time
        # charge than the best enumerated cost
        field = empty_field((4.0, 4.0, 4.0), 0.5)
        tau, rho = 0.5, 2.0
        axis = [-1.0, 0.0, 1.0]
        ctrls = [(x, y, z) for x in axis for y in axis for z in axis]
        hits = []
        for depth in (1, 2, 3):
            for seq in itertools.product(ctrls, repeat=depth):
                p, v, cost = simulate_sequence(
                    [2.0, 2.0, 2.0], [0.0, 0.0, 0.0], seq, tau, rho
                )
                if p == [2.25, 2.0, 2.0] and v == [0.0, 0.0, 0.0]:
                    hits.append(cost)
        assert len(hits) == 3
        assert min(hits) == 3.0
        # 4 steps of pure time charge already cost 4.0 > 3.0, so the
        # enumerated floor is the global one
        assert 4 * rho * tau > min(hits)

        res = search(
            rest(2.0, 2.0, 2.0),
            rest(2.25, 2.0, 2.0),
            make_cf(field),
            SearchConfig(
                u_max=1.0,
                r=1,
                tau=tau,
                rho=rho,
                prune_resolution=0.1,
                goal_tolerance=1e-9,
                goal_velocity_tolerance=1e-9,
                max_expansions=2000,
            ),
        )
        assert res.found and res.reason == "goal"
        assert res.cost == min(hits)
        assert len(res.primitives) == 2
        assert np.array_equal(res.states[-1].position, [2.25, 2.0, 2.0])
        assert np.array_equal(res.states[-1].velocity, [0.0, 0.0, 0.0])

    def test_near_optimal_in_open_space(self):
        field = empty_field((8.0, 4.0, 4.0), 0.25)
        res = search(
            rest(1.0, 2.0, 2.0),
            rest(4.25, 2.0, 2.0),
            make_cf(field),
            SearchConfig(
                u_max=2.0,
                r=2,
                tau=0.5,
                rho=4.0,
                prune_resolution=0.25,
                velocity_prune_resolution=0.25,
                goal_tolerance=0.3,
                goal_velocity_tolerance=0.3,
                max_expansions=20000,
                v_max=3.0,
            ),
        )
        bound = rest_to_rest_bound(3.25, 4.0)
        assert res.found and res.reason == "goal"
        assert res.cost == 17.0
        assert res.cost <= 1.05 * bound
        assert res.expansions <= 50

    def test_start_at_goal(self, open_cf):
        s = rest(2.0, 2.0, 2.0)
        res = search(s, s, open_cf, SearchConfig(u_max=1.0))
        assert res.found and res.reason == "goal"
        assert res.cost == 0.0 and res.expansions == 0
        assert len(res.states) == 1 and not res.primitives


class TestSearchBookkeeping:
    def test_path_cost_is_edge_cost_sum(self, window_field):
        # awkward u_max exercises non-representable control values; the sum
        # must still match bit for bit
        config = SearchConfig(
            u_max=1.3,
            r=2,
            tau=0.5,
            rho=3.0,
            prune_resolution=0.3,
            goal_tolerance=0.5,
            max_expansions=3000,
            v_max=2.5,
            arc_check_samples=6,
            w_mmd=0.01,
        )
        cf = make_cf(window_field)
        res = search(rest(1.0, 2.0, 2.0), rest(5.0, 2.0, 2.0), cf, config)
        assert res.found
        assert len(res.states) == len(res.primitives) + 1
        assert len(res.path_mmd) == len(res.states)
        total = 0.0
        for i, prim in enumerate(res.primitives):
            dm = res.path_mmd[i + 1] - res.path_mmd[i]
            total = total + edge_cost(prim, config.rho, dm, config.w_mmd)
        assert total == res.cost
        assert res.path_mmd[0] == cf.point_mmd(res.states[0].position)

    def test_states_chain_through_propagate(self, window_field):
        config = SearchConfig(
            u_max=2.0,
            r=2,
            tau=0.5,
            rho=3.0,
            prune_resolution=0.3,
            goal_tolerance=0.5,
            max_expansions=3000,
            v_max=2.5,
            arc_check_samples=6,
            w_mmd=0.01,
        )
        res = search(
            rest(1.0, 2.0, 2.0), rest(5.0, 2.0, 2.0), make_cf(window_field), config
        )
        assert res.found
        for s0, prim, s1 in zip(res.states, res.primitives, res.states[1:]):
            nxt = propagate(s0, prim)
            assert np.array_equal(nxt.position, s1.position)
            assert np.array_equal(nxt.velocity, s1.velocity)

    def test_trace_layout(self, open_cf):
        res = search(
            rest(1.0, 2.0, 2.0),
            rest(6.0, 2.0, 2.0),
            open_cf,
            SearchConfig(
                u_max=2.0, r=2, tau=0.5, rho=4.0,
                prune_resolution=0.25, goal_tolerance=0.3, max_expansions=3,
            ),
        )
        assert not res.found and res.reason == "max-expansions"
        assert res.expansions == 3
        assert res.trace.shape == (3, len(TRACE_COLUMNS))
        np.testing.assert_array_equal(res.trace[0, :3], [1.0, 2.0, 2.0])
        # f = g + h on every expanded node
        np.testing.assert_array_equal(
            res.trace[:, 3], res.trace[:, 4] + res.trace[:, 5]
        )

    def test_unweighted_search_ignores_draw_seed(self, window_field):
        config = SearchConfig(
            u_max=2.0,
            r=2,
            tau=0.5,
            rho=3.0,
            prune_resolution=0.3,
            goal_tolerance=0.5,
            max_expansions=3000,
            v_max=2.5,
            arc_check_samples=6,
        )
        runs = [
            search(
                rest(1.0, 2.0, 2.0),
                rest(5.0, 2.0, 2.0),
                make_cf(window_field, seed=s),
                config,
            )
            for s in (0, 1, 2)
        ]
        assert all(r.found for r in runs)
        assert len({r.cost for r in runs}) == 1
        assert all(r.expansions == runs[0].expansions for r in runs)
        for r in runs[1:]:
            assert np.array_equal(
                r.states[-1].position, runs[0].states[-1].position
            )

    def test_rejects_occupied_endpoints(self, window_field):
        cf = make_cf(window_field)
        inside = rest(3.0, 1.0, 1.0)  # solid part of the slab
        free = rest(1.0, 2.0, 2.0)
        with pytest.raises(InvalidQueryError):
            search(inside, free, cf, SearchConfig(u_max=1.0))
        with pytest.raises(InvalidQueryError):
            search(free, inside, cf, SearchConfig(u_max=1.0))

    def test_node_mmd_reads_the_field(self, window_field):
        cf = make_cf(window_field)
        assert node_mmd(rest(1.0, 2.0, 2.0), cf) == 0.0
        assert node_mmd(rest(3.0, 2.0, 2.0), cf) > 0.0


class TestFeasibilityGates:
    def test_swept_arc_blocks_wall_straddle(self):
        # a fast node jumps the 0.8 m slab in one primitive: both endpoints
        # sit in free space, only interior samples see the wall
        spec = WorldSpec(
            archetype="custom",
            extent=(6.0, 4.0, 4.0),
            density=0.0,
            seed=0,
            resolution=0.2,
            obstacles=(Box((2.6, 0.0, 0.0), (3.4, 4.0, 4.0)),),
        )
        field = compute_edt(generate_world(spec))
        start = KinoState(np.array([2.03, 2.0, 2.0]), np.array([3.0, 0.0, 0.0]))
        goal = rest(3.53, 2.0, 2.0)
        base = dict(
            u_max=4.0, r=1, tau=0.5, rho=1.0,
            prune_resolution=0.2, goal_tolerance=0.3, max_expansions=100,
        )
        permissive = search(
            start, goal, make_cf(field), SearchConfig(arc_check_samples=0, **base)
        )
        guarded = search(
            start, goal, make_cf(field), SearchConfig(arc_check_samples=4, **base)
        )
        assert permissive.found and permissive.reason == "goal"
        assert not guarded.found and guarded.reason == "exhausted"
        assert guarded.expansions == 1  # every root child dies on the sweep

    def test_arc_risk_cap_gates_uncertain_window(self, window_field):
        # every crossing of the 0.5 m opening measures ~0.4 m, putting the
        # modeled violation probability at Phi((0.3 - 0.4) / 0.2) ~ 0.31;
        # a 0.1 cap must refuse the crossing that an uncapped run accepts
        cf = make_cf(window_field)
        assert cf.noise.cdf(np.array([0.3 - 0.4]))[0] > 0.1
        base = dict(
            u_max=2.0, r=2, tau=0.5, rho=3.0,
            prune_resolution=0.3, goal_tolerance=0.5, v_max=2.5,
            arc_check_samples=6, w_mmd=0.01,
        )
        capped = search(
            rest(1.0, 2.0, 2.0),
            rest(5.0, 2.0, 2.0),
            cf,
            SearchConfig(arc_risk_cap=0.1, max_expansions=1500, **base),
        )
        open_gate = search(
            rest(1.0, 2.0, 2.0),
            rest(5.0, 2.0, 2.0),
            cf,
            SearchConfig(arc_risk_cap=1.0, max_expansions=1500, **base),
        )
        assert not capped.found
        assert open_gate.found and open_gate.reason == "goal"

    def test_velocity_retention_keeps_rest_goal_reachable(self):
        # collapsing retention to position only strands the search: cells
        # fill with fast pass-through nodes and the braking approach dies
        field = empty_field((5.0, 3.0, 3.0), 0.25)
        base = dict(
            u_max=2.0, r=1, tau=0.5, rho=2.0,
            prune_resolution=0.3, goal_tolerance=0.3,
            goal_velocity_tolerance=0.2, max_expansions=4000, v_max=2.0,
        )
        start, goal = rest(1.0, 1.5, 1.5), rest(3.5, 1.5, 1.5)
        with_velocity = search(start, goal, make_cf(field), SearchConfig(**base))
        position_only = search(
            start,
            goal,
            make_cf(field),
            SearchConfig(velocity_prune_resolution=np.inf, **base),
        )
        assert with_velocity.found and with_velocity.reason == "goal"
        assert not position_only.found


class TestDirectConnect:
    def test_shortcut_in_open_space(self, open_cf):
        start, goal = rest(1.0, 2.0, 2.0), rest(6.0, 2.0, 2.0)
        config = SearchConfig(
            u_max=2.0,
            r=2,
            tau=0.5,
            rho=4.0,
            prune_resolution=0.25,
            goal_tolerance=0.3,
            goal_velocity_tolerance=0.3,
            max_expansions=2000,
            direct_connect=True,
        )
        res = search(start, goal, open_cf, config)
        assert res.found and res.reason == "direct-connect"
        assert res.connect is not None
        assert len(res.states) == 1 and res.expansions == 0
        # the lattice cost excludes the connect leg; from the root it is 0
        assert res.cost == 0.0
        _, t_star = optimal_arrival(start, goal, config.rho)
        pos, vel, _ = evaluate_batch(res.connect, np.array([0.0, t_star]))
        np.testing.assert_allclose(pos[0], start.position, atol=1e-9)
        np.testing.assert_allclose(pos[-1], goal.position, atol=1e-8)
        np.testing.assert_allclose(vel[-1], np.zeros(3), atol=1e-8)


class TestConfigValidation:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(u_max=0.0),
            dict(u_max=1.0, r=0),
            dict(u_max=1.0, tau=0.0),
            dict(u_max=1.0, rho=-0.1),
            dict(u_max=1.0, prune_resolution=0.0),
            dict(u_max=1.0, goal_tolerance=0.0),
            dict(u_max=1.0, velocity_prune_resolution=0.0),
            dict(u_max=1.0, max_expansions=0),
            dict(u_max=1.0, w_mmd=-1.0),
            dict(u_max=1.0, direct_connect_interval=0),
            dict(u_max=1.0, arc_check_samples=-1),
            dict(u_max=1.0, arc_risk_cap=0.0),
            dict(u_max=1.0, arc_risk_cap=1.5),
        ],
    )
    def test_rejects_bad_config(self, kw):
        with pytest.raises(InvalidSpecError):
            SearchConfig(**kw)

    def test_defaults_are_valid(self):
        config = SearchConfig(u_max=2.0)
        assert config.arc_risk_cap == 1.0
        assert config.velocity_prune_resolution is None
