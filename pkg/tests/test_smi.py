import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from afd.errors import DimensionMismatch
from afd.geometry import HyperRect, Polytope, contains, intersect, is_empty
from afd.smi import (Cause, ModelEstimate, SmiState, Source, box_from_matrices, check_shutdown,
                     current_model, delta_rows, lse, param_volume, smi_update, unvec_ab, vec_ab)


@pytest.fixture(scope="module")
def setup():
    from afd.config import paper_sim

    p = paper_sim().plant
    return p, p.AB0.to_polytope()


def run_stream(p, AB0, A, B, seed, steps, u_scale=1.0, theta_nom=None):
    """Feed the identifier a closed-loop-free stream from (A, B) with random inputs."""
    r = np.random.default_rng(seed)
    theta_nom = p.theta_nom if theta_nom is None else theta_nom
    S = SmiState.initial(AB0, 2, 1, theta_nom)
    x = r.uniform(-1, 1, 2)
    states = [S]
    for k in range(steps):
        u = r.uniform(-u_scale, u_scale, 1)
        x_next = A @ x + B @ u + r.uniform(-0.01, 0.01, 2)
        S = smi_update(S, x, u, x_next, p.W, theta_nom, AB0, step=k + 1)
        states.append(S)
        # keep the state bounded so long streams stay informative but finite
        x = np.clip(x_next, -3, 3) if np.max(np.abs(x_next)) > 3 else x_next
    return states


# ---------------------------------------------------------------- parameter ordering

def test_vec_is_column_major():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    B = np.array([[5.0], [6.0]])
    assert np.array_equal(vec_ab(A, B), [1, 3, 2, 4, 5, 6])
    A2, B2 = unvec_ab(vec_ab(A, B), 2, 1)
    assert np.array_equal(A2, A) and np.array_equal(B2, B)


def test_initial_volume(setup):
    p, AB0 = setup
    S = SmiState.initial(AB0, 2, 1, p.theta_nom)
    assert param_volume(S) == pytest.approx(0.3024, abs=1e-12)


def test_unit_box_volume():
    box = HyperRect(-np.ones(6), np.ones(6))
    assert param_volume(SmiState.initial(box.to_polytope(), 2, 1)) == pytest.approx(64.0)


# ---------------------------------------------------------------- delta_rows

def test_delta_rows_noiseless_slack(setup):
    p, _ = setup
    x, u = np.array([0.3, -0.2]), np.array([0.7])
    x_next = p.A_nom @ x + p.B_nom @ u
    G, g = delta_rows(x, u, x_next, p.W)
    assert np.allclose(g - G @ p.theta_nom, p.W.g)


def test_delta_rows_zero_regressor(setup):
    p, _ = setup
    G, g = delta_rows(np.zeros(2), np.zeros(1), np.array([0.005, -0.002]), p.W)
    assert np.all(G == 0) and np.all(g >= 0)
    _, g_bad = delta_rows(np.zeros(2), np.zeros(1), np.array([0.05, 0.0]), p.W)
    assert np.any(g_bad < 0)


def test_delta_rows_fault2_excludes_nominal(setup):
    p, _ = setup
    A2, B2 = p.fault_events[1].A, p.fault_events[1].B
    x, u = np.array([1.0, 0.0]), np.array([1.0])
    G, g = delta_rows(x, u, A2 @ x + B2 @ u, p.W)
    assert np.any(G @ p.theta_nom > g)


def test_delta_rows_dimension_check(setup):
    p, _ = setup
    with pytest.raises(DimensionMismatch):
        delta_rows(np.zeros(2), np.zeros(1), np.zeros(3), p.W)


@given(st.integers(0, 10_000))
def test_delta_rows_characterize_disturbance(seed):
    r = np.random.default_rng(seed)
    W = Polytope.from_box([-0.01, -0.01], [0.01, 0.01])
    theta = r.normal(size=6)
    A, B = unvec_ab(theta, 2, 1)
    x, u = r.normal(size=2), r.normal(size=1)
    w = r.uniform(-0.02, 0.02, 2)
    G, g = delta_rows(x, u, A @ x + B @ u + w, W)
    assert bool(np.all(G @ theta <= g + 1e-12)) == bool(np.all(np.abs(w) <= 0.01))


# ---------------------------------------------------------------- smi_update

def test_nominal_stream_never_detects(setup):
    p, AB0 = setup
    for S in run_stream(p, AB0, p.A_nom, p.B_nom, seed=1, steps=15, u_scale=2.0):
        assert not S.fault_detected


def test_fault2_stream_detected_quickly(setup):
    p, AB0 = setup
    A2, B2 = p.fault_events[1].A, p.fault_events[1].B
    states = run_stream(p, AB0, A2, B2, seed=2, steps=6, u_scale=2.0)
    assert states[-1].fault_detected
    assert states[-1].detection_log[0].step <= 3


def test_uninformative_datum_keeps_set(setup):
    p, AB0 = setup
    S = SmiState.initial(AB0, 2, 1, p.theta_nom)
    S2 = smi_update(S, np.zeros(2), np.zeros(1), np.array([0.004, 0.0]), p.W, p.theta_nom, AB0, step=1)
    assert S2.param_box == S.param_box
    assert not S2.fault_detected


def test_reset_keeps_only_current_datum(setup):
    p, AB0 = setup
    A2, B2 = p.fault_events[1].A, p.fault_events[1].B
    S = SmiState.initial(AB0, 2, 1, p.theta_nom)
    r = np.random.default_rng(4)
    x = np.array([1.0, -0.5])
    for k in range(6):
        u = r.uniform(-2, 2, 1)
        x_next = p.A_nom @ x + p.B_nom @ u + r.uniform(-0.01, 0.01, 2)
        S = smi_update(S, x, u, x_next, p.W, p.theta_nom, AB0, step=k + 1)
        x = x_next
    u = np.array([1.5])
    x_next = A2 @ x + B2 @ u
    S = smi_update(S, x, u, x_next, p.W, p.theta_nom, AB0, step=7)
    assert S.reset_at_last_update and S.detection_log[-1].cause is Cause.EMPTY_SET
    assert S.H_xu.shape[1] == 1 and S.H_xplus.shape[1] == 1
    G, g = delta_rows(x, u, x_next, p.W)
    expected = intersect(AB0, G, g)
    pts = np.random.default_rng(0).uniform(p.AB0.lo, p.AB0.hi, size=(4000, 6))
    inside_a = np.all(pts @ S.param_set.G.T <= S.param_set.g + 1e-9, axis=1)
    inside_b = np.all(pts @ expected.G.T <= expected.g + 1e-9, axis=1)
    assert np.array_equal(inside_a, inside_b)


@given(st.integers(0, 10_000))
def test_true_parameter_never_excluded(seed):
    """The data-generating parameter stays in the set for any admissible plant."""
    from afd.config import paper_sim

    p = paper_sim().plant
    AB0 = p.AB0.to_polytope()
    r = np.random.default_rng(seed)
    theta = r.uniform(p.AB0.lo, p.AB0.hi)
    A, B = unvec_ab(theta, 2, 1)
    for S in run_stream(p, AB0, A, B, seed=seed, steps=12, u_scale=1.5):
        assert contains(S.param_set, theta, tol=1e-9)
        assert not S.reset_at_last_update


@given(st.integers(0, 10_000))
def test_volume_non_increasing_between_resets(seed):
    from afd.config import paper_sim

    p = paper_sim().plant
    AB0 = p.AB0.to_polytope()
    A2, B2 = p.fault_events[1].A, p.fault_events[1].B
    states = run_stream(p, AB0, A2, B2, seed=seed, steps=12, u_scale=1.5)
    for prev, cur in zip(states, states[1:]):
        if not cur.reset_at_last_update:
            assert param_volume(cur) <= param_volume(prev)


# ---------------------------------------------------------------- lse / current_model

def test_lse_noiseless_fault2_recovery(setup):
    p, _ = setup
    A2, B2 = p.fault_events[1].A, p.fault_events[1].B
    H_xu = np.array([[1.0, 0.0, 0.3], [0.0, 1.0, -0.4], [0.5, -1.0, 2.0]])
    H_x = np.hstack([A2, B2]) @ H_xu
    A, B = lse(H_xu, H_x)
    assert np.max(np.abs(A - A2)) <= 1e-10 and np.max(np.abs(B - B2)) <= 1e-10


def test_lse_identical_columns_rank_deficient():
    H = np.tile([[1.0], [2.0], [3.0]], 5)
    assert lse(H, H[:2]) is None


@given(st.integers(0, 10_000))
def test_lse_matches_normal_equations(seed):
    r = np.random.default_rng(seed)
    H_xu = r.normal(size=(3, 8))
    H_x = r.normal(size=(2, 8))
    A, B = lse(H_xu, H_x)
    ref = np.linalg.solve(H_xu @ H_xu.T, H_xu @ H_x.T).T
    assert np.max(np.abs(np.hstack([A, B]) - ref)) <= 1e-9


def test_lse_noisy_fault2_close(setup):
    p, _ = setup
    A2, B2 = p.fault_events[1].A, p.fault_events[1].B
    r = np.random.default_rng(9)
    X = r.uniform(-2, 2, size=(2, 20))
    U = r.uniform(-2, 2, size=(1, 20))
    H_xu = np.vstack([X, U])
    H_x = A2 @ X + B2 @ U + r.uniform(-0.01, 0.01, size=(2, 20))
    A, _ = lse(H_xu, H_x)
    assert np.max(np.abs(A - A2)) <= 0.05


def test_current_model_rules(setup):
    p, AB0 = setup
    nominal = ModelEstimate(p.A_nom, p.B_nom)
    S = SmiState.initial(AB0, 2, 1, p.theta_nom)
    assert current_model(S, nominal).source is Source.NOMINAL
    flagged = S.__class__(**{**S.__dict__, "fault_detected": True})
    M = current_model(flagged, nominal)
    assert M.source is Source.GEOMETRIC_CENTER
    assert np.allclose(M.theta, 0.5 * (p.AB0.lo + p.AB0.hi))
    A1, B1 = p.fault_events[0].A, p.fault_events[0].B
    H_xu = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.5], [0.0, 0.0, 1.0]])
    full = S.__class__(**{**flagged.__dict__, "H_xu": H_xu, "H_xplus": np.hstack([A1, B1]) @ H_xu})
    M = current_model(full, nominal)
    assert M.source is Source.LEAST_SQUARES
    assert np.allclose(M.A_hat, A1, atol=1e-12) and np.allclose(M.B_hat, B1, atol=1e-12)


def test_check_shutdown(setup):
    p, AB0 = setup
    assert not check_shutdown(ModelEstimate(p.A_nom, p.B_nom), AB0)
    A = p.A_nom.copy()
    A[0, 0] = 5.0
    assert check_shutdown(ModelEstimate(A, p.B_nom), AB0)
    A[0, 0] = 1.3
    assert not check_shutdown(ModelEstimate(A, p.B_nom), AB0)


def test_box_from_matrices_ordering():
    box = box_from_matrices(np.zeros((2, 2)), np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros((2, 1)),
                            np.array([[5.0], [6.0]]))
    assert np.array_equal(box.hi, [1, 3, 2, 4, 5, 6])
    assert not is_empty(box.to_polytope())
