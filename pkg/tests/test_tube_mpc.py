import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from afd.errors import UnboundedTubeShape
from afd.excitation import ExcitationHistory, beta
from afd.geometry import HyperRect, Polytope, contains, solve_lp
from afd.tube_mpc import (OcpStatus, Strategy, build_ocp, check_feasibility, nominal_predict, pe_margin,
                          precompute_tube, solve_ocp, solve_with_backoff, tracking_cost,
                          tube_constraint_rows)


@pytest.fixture(scope="module")
def plant():
    from afd.config import paper_sim

    return paper_sim().plant


@pytest.fixture(scope="module")
def td(plant):
    return precompute_tube(plant.tube_set, plant.K, plant.X, plant.U, plant.W, plant.AB0)


def make_ocp(plant, td, x, b=0.0, ghost=2, hist=None, A=None, B=None, recent=()):
    if hist is None:
        hist = ExcitationHistory()
        hist.start(x)
    return build_ocp(td, x, plant.N, plant.A_nom if A is None else A, plant.B_nom if B is None else B,
                     plant.Q, plant.R, ghost=ghost, beta=b, history=hist, W=plant.W,
                     recent_inputs=list(recent), pe_a=plant.pe_a)


# ---------------------------------------------------------------- precompute_tube

def test_supports_for_unit_ball(plant, td):
    assert np.allclose(td.h_x, 1.0)
    assert np.allclose(td.h_u, 0.2121)
    assert np.allclose(td.w_support, 0.01)
    assert len(td.param_vertices) == 64


def test_zero_gain_has_zero_input_support(plant):
    td0 = precompute_tube(plant.tube_set, np.zeros((1, 2)), plant.X, plant.U, plant.W, plant.AB0)
    assert np.allclose(td0.h_u, 0.0)


def test_tube_shape_must_contain_origin(plant):
    bad = Polytope.from_box([0.1, 0.1], [1, 1])
    with pytest.raises(UnboundedTubeShape):
        precompute_tube(bad, plant.K, plant.X, plant.U, plant.W, plant.AB0)


def test_single_vertex_noiseless_rows():
    X = Polytope.from_box([-5, -5], [5, 5])
    U = Polytope.from_box([-5], [5])
    W0 = Polytope.from_box([0, 0], [0, 0])
    box = HyperRect([0.5, 0, 0, 0.5, 0, 1], [0.5, 0, 0, 0.5, 0, 1])
    td1 = precompute_tube(Polytope.from_box([-1, -1], [1, 1]), np.zeros((1, 2)), X, U, W0, box)
    A, b, ok = tube_constraint_rows(td1, np.zeros(2), 1)
    assert ok
    # v0 = 1 lands at B v0 = (0, 1): z1 = (0, 1), alpha1 = 0 is feasible, z1 = (0, 0) needs alpha1 >= 1
    assert np.all(A @ np.array([1.0, 0.0, 1.0, 0.0]) <= b + 1e-12)
    assert np.any(A @ np.array([1.0, 0.0, 0.0, 0.5]) > b + 1e-12)
    assert np.all(A @ np.array([1.0, 0.0, 0.0, 1.0]) <= b + 1e-12)


# ---------------------------------------------------------------- prediction and costs

def test_nominal_predict_examples(plant):
    assert np.allclose(nominal_predict(plant.A_nom, plant.B_nom, plant.K, np.zeros(2), np.zeros(3)), 0)
    x1 = nominal_predict(plant.A_nom, plant.B_nom, plant.K, [1.0, 0.0], [0.0])[0]
    assert np.allclose(x1, [0.99795, -0.0205])


def test_nominal_predict_matches_plant_step(plant):
    from afd.simulator import plant_step

    x, v = np.array([0.3, -0.4]), 0.7
    u = plant.K @ x + v
    assert np.allclose(nominal_predict(plant.A_nom, plant.B_nom, plant.K, x, [v])[0],
                       plant_step(plant.A_nom, plant.B_nom, x, u, np.zeros(2)))


def test_tracking_cost_examples(plant):
    assert tracking_cost([[0.0, 0.0]], [0.0], (np.zeros(2), np.zeros(1)), plant.Q, plant.R, plant.K) == 0.0
    assert tracking_cost([[2.0]], [0.0], (np.zeros(1), np.zeros(1)), [[1.0]], [[1e-300]], [[0.0]]) == 4.0
    val = tracking_cost([[1.0, 1.0]], [0.0], (np.zeros(2), np.zeros(1)), plant.Q, plant.R, plant.K)
    assert val == pytest.approx(0.2 + 0.01 * 0.2121 ** 2)
    assert val == pytest.approx(0.20045, abs=1e-5)


def test_pe_margin_examples():
    assert pe_margin([[0.0], [0.0], [0.0]], 3.0, 2) == -3.0
    assert pe_margin([[2.0], [2.0]], 3.0, 1) == 5.0
    assert pe_margin([], 3.0, 2) == -3.0
    # only the last n + 1 inputs count
    assert pe_margin([[10.0], [1.0], [1.0]], 1.0, 1) == 1.0


# ---------------------------------------------------------------- solve_ocp

def test_origin_is_optimal_at_rest():
    X = Polytope.from_box([-5, -5], [5, 5])
    U = Polytope.from_box([-5], [5])
    W0 = Polytope.from_box([0, 0], [0, 0])
    A = np.array([[0.5, 0.1], [0.0, 0.5]])
    B = np.array([[0.0], [1.0]])
    box = HyperRect([0.5, 0, 0.1, 0.5, 0, 1], [0.5, 0, 0.1, 0.5, 0, 1])
    K = np.array([[-0.0205, -0.1916]])
    tdz = precompute_tube(Polytope.from_box([-1, -1], [1, 1]), K, X, U, W0, box)
    ocp = build_ocp(tdz, np.zeros(2), 3, A, B, 0.1 * np.eye(2), [[0.01]])
    sol = solve_ocp(ocp, Strategy.PASSIVE)
    assert sol.status is OcpStatus.SOLVED
    assert np.allclose(sol.v_seq, 0, atol=1e-9)


def test_solution_satisfies_rows(plant, td):
    for strategy in Strategy:
        ocp = make_ocp(plant, td, plant.x0, b=0.96)
        sol = solve_ocp(ocp, strategy)
        assert sol.status is OcpStatus.SOLVED
        assert check_feasibility(ocp, sol) == []


def test_perturbed_solution_flagged(plant, td):
    ocp = make_ocp(plant, td, plant.x0)
    sol = solve_ocp(ocp, Strategy.PASSIVE)
    d = sol.d.copy()
    d[ocp.layout.z(1)] += 10.0
    assert check_feasibility(ocp, d) != []


def test_lp_interior_point_feasible(plant, td):
    ocp = make_ocp(plant, td, plant.x0)
    lp = solve_lp(np.zeros(ocp.layout.size), Polytope(ocp.A_rows, ocp.b_rows))
    assert lp.optimal
    assert check_feasibility(ocp, lp.point) == []


def test_beta_zero_proposed_equals_passive(plant, td):
    r = np.random.default_rng(0)
    for _ in range(10):
        x = r.uniform(-0.05, 0.05, 2)
        sp = solve_ocp(make_ocp(plant, td, x, b=0.0), Strategy.PASSIVE)
        sq = solve_ocp(make_ocp(plant, td, x, b=0.0), Strategy.PROPOSED)
        assert abs(sp.v0[0] - sq.v0[0]) <= 1e-6


def test_proposed_excites_more_than_passive(plant, td):
    b = beta(0.3024, plant.schedule)
    assert b == pytest.approx(0.96, abs=0.01)
    sp = solve_ocp(make_ocp(plant, td, plant.x0, b=b), Strategy.PASSIVE)
    ocp = make_ocp(plant, td, plant.x0, b=b)
    sq = solve_ocp(ocp, Strategy.PROPOSED)
    assert abs(sq.v0[0]) > abs(sp.v0[0])
    assert check_feasibility(ocp, sq) == []


@pytest.mark.parametrize("seed", range(5))
def test_sqp_merit_non_increasing(plant, td, seed):
    hist = ExcitationHistory()
    r = np.random.default_rng(seed)
    x = np.array(plant.x0, dtype=float)
    hist.start(x)
    for _ in range(4):
        u = r.uniform(-0.01, 0.01, 1)
        x = plant.A_nom @ x + plant.B_nom @ u + r.uniform(-0.01, 0.01, 2)
        hist.push(u, x)
    sol = solve_ocp(make_ocp(plant, td, x, b=0.9, hist=hist), Strategy.PROPOSED)
    assert sol.status is OcpStatus.SOLVED
    assert len(sol.merit_trace) >= 2
    assert all(b <= a + 1e-12 for a, b in zip(sol.merit_trace, sol.merit_trace[1:]))


def test_adaptive_pe_reaches_bound_when_possible(plant, td):
    # a loose problem where |u0| >= sqrt(3) is reachable
    loose = precompute_tube(plant.tube_set, plant.K, plant.X, plant.U, plant.W,
                            HyperRect(plant.theta_nom, plant.theta_nom))
    ocp = make_ocp(plant, loose, plant.x0, ghost=0)
    sol = solve_ocp(ocp, Strategy.ADAPTIVE_PE)
    u0 = plant.K @ plant.x0 + sol.v0
    assert not sol.pe_relaxed
    assert pe_margin([u0], plant.pe_a, plant.n) >= -1e-9


def test_adaptive_pe_relaxes_to_reachable_excitation(plant, td):
    ocp = make_ocp(plant, td, plant.x0)
    sol = solve_ocp(ocp, Strategy.ADAPTIVE_PE)
    passive = solve_ocp(make_ocp(plant, td, plant.x0), Strategy.PASSIVE)
    assert sol.pe_relaxed and sol.status is OcpStatus.SOLVED
    assert abs(sol.v0[0]) > abs(passive.v0[0])
    assert check_feasibility(ocp, sol) == []


def test_backoff_drops_stages_then_excitation(plant, td):
    x = np.array([0.3, 0.1])

    def build(h):
        return make_ocp(plant, td, x, b=0.96, ghost=h)

    assert solve_ocp(build(1), Strategy.PASSIVE).status is OcpStatus.INFEASIBLE
    sol = solve_with_backoff(build, Strategy.PROPOSED, 2)
    assert sol.status is OcpStatus.SOLVED and sol.fallback and sol.ghost == 0
    plain = solve_ocp(build(0), Strategy.PASSIVE)
    assert np.allclose(sol.v_seq, plain.v_seq)


def test_backoff_keeps_full_depth_when_feasible(plant, td):
    sol = solve_with_backoff(lambda h: make_ocp(plant, td, plant.x0, b=0.96, ghost=h), Strategy.PROPOSED, 2)
    assert sol.status is OcpStatus.SOLVED and not sol.fallback and sol.ghost == 2


@given(st.integers(0, 10_000))
def test_tube_nesting_exact_model(seed):
    from afd.config import paper_sim

    plant = paper_sim().plant
    td = precompute_tube(plant.tube_set, plant.K, plant.X, plant.U, plant.W, plant.AB0)
    r = np.random.default_rng(seed)
    x = r.uniform(-0.05, 0.05, 2)
    ocp = make_ocp(plant, td, x, ghost=1)
    sol = solve_ocp(ocp, Strategy.PASSIVE)
    if sol.status is not OcpStatus.SOLVED:
        return
    x1 = plant.A_nom @ x + plant.B_nom @ (plant.K @ x + sol.v0)
    GT, gT = plant.tube_set.G, plant.tube_set.g
    assert np.all(GT @ (x1 - sol.z_seq[0]) <= sol.alpha_seq[0] * gT + 1e-9)
    assert contains(plant.X, x1)
