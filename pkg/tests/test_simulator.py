from dataclasses import replace

import numpy as np
import pytest

from afd.excitation import BetaSchedule
from afd.geometry import contains
from afd.simulator import (FaultEvent, episode_outcome, fault_at, fault_index, fault_windows, plant_step,
                           run_episode, run_monte_carlo, sample_disturbance)
from afd.smi import SmiState, smi_update, unvec_ab, vec_ab


@pytest.fixture(scope="module")
def plant():
    from afd.config import paper_sim

    return paper_sim().plant


@pytest.fixture(scope="module")
def short(plant):
    return replace(plant, steps=12)


def records_equal(a, b):
    for name in ("x", "u", "v", "beta", "volume", "volume_after", "fault_flag", "detected", "x_final"):
        if not np.array_equal(getattr(a, name), getattr(b, name)):
            return False
    return (a.ocp_status == b.ocp_status and a.truncated_at == b.truncated_at
            and [(e.step, e.cause) for e in a.detection_events] == [(e.step, e.cause) for e in b.detection_events])


def test_plant_step():
    A = np.array([[1.0, 2.0], [0.0, 1.0]])
    B = np.array([[0.0], [1.0]])
    assert np.allclose(plant_step(A, B, [1.0, 1.0], [2.0], [0.1, -0.1]), [3.1, 2.9])


def test_disturbance_samples(plant):
    a = sample_disturbance(plant.W, np.random.Generator(np.random.PCG64(7)), size=100_000)
    b = sample_disturbance(plant.W, np.random.Generator(np.random.PCG64(7)), size=100_000)
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= 0.01)
    # uniform on [-0.01, 0.01]: std 0.01/sqrt(3); mean within 5 standard errors
    se = 0.01 / np.sqrt(3) / np.sqrt(a.shape[0])
    assert np.all(np.abs(a.mean(axis=0)) <= 5 * se)


def test_fault_at(plant):
    nominal = (plant.A_nom, plant.B_nom)
    assert fault_at((), 5, nominal) is nominal
    F1, F2 = plant.fault_events
    assert fault_at(plant.fault_events, 9, nominal) == (F1.A, F1.B)
    assert fault_at(plant.fault_events, 10, nominal) == (F2.A, F2.B)
    tie = (FaultEvent(3, np.eye(2), np.zeros((2, 1))), FaultEvent(3, 2 * np.eye(2), np.ones((2, 1))))
    assert np.array_equal(fault_at(tie, 3)[0], 2 * np.eye(2))
    assert fault_index(tie, 3) == 2 and fault_index(tie, 2) == 0


def test_fault_windows(plant):
    assert fault_windows(plant) == [(0, 1, 10), (10, 11, 25)]


@pytest.mark.parametrize("strategy", ["passive", "adaptive_pe", "proposed"])
def test_episode_deterministic(short, strategy):
    a = run_episode(short, strategy, 3)
    b = run_episode(short, strategy, 3)
    assert records_equal(a, b)


def test_episode_record_shapes_and_constraints(plant):
    rec = run_episode(plant, "proposed", 0)
    T = rec.n_steps
    assert rec.u.shape == (T, 1) and rec.x.shape == (T, 2)
    assert rec.volume[0] == pytest.approx(0.3024)
    assert rec.volume_after.size == T + (1 if rec.truncated_at is None else 0)
    for x in rec.x:
        assert contains(plant.X, x)
    for u in rec.u:
        assert contains(plant.U, u)


@pytest.mark.parametrize("seed", range(4))
def test_volume_non_increasing_between_resets(plant, seed):
    rec = run_episode(plant, "proposed", seed)
    resets = {e.step for e in rec.detection_events if e.cause.name == "EMPTY_SET"}
    for k in range(1, rec.volume_after.size):
        if k not in resets:
            assert rec.volume_after[k] <= rec.volume_after[k - 1] * (1 + 1e-12)


def test_smi_contains_active_parameter(plant):
    rec = run_episode(plant, "proposed", 5)
    AB0 = plant.AB0.to_polytope()
    S = SmiState.initial(AB0, 2, 1, plant.theta_nom)
    nominal = (plant.A_nom, plant.B_nom)
    last_reset = 0
    seg_start = {ev.step + 1 for ev in plant.fault_events}
    for k in range(1, rec.n_steps):
        S = smi_update(S, rec.x[k - 1], rec.u[k - 1], rec.x[k], plant.W, plant.theta_nom, AB0, step=k)
        if S.reset_at_last_update:
            last_reset = k
        A, B = fault_at(plant.fault_events, k - 1, nominal)
        seg = max(s for s in seg_start if s <= k)
        if last_reset >= seg or seg == 1:
            assert contains(S.param_set, vec_ab(A, B), tol=1e-9)


def test_detection_time_convention(plant):
    rec = run_episode(plant, "proposed", 0)
    out = episode_outcome(plant, rec)
    for f, (onset, first, last) in enumerate(fault_windows(plant)):
        hits = [e.step for e in rec.detection_events if first <= e.step <= last]
        if hits:
            assert out.detection_time[f] == min(hits) - onset >= 1


def test_passive_equals_proposed_without_excitation(plant):
    cfg = replace(plant, fault_events=(), schedule=BetaSchedule(1.0, 2.0), passive_tube="current", steps=10)
    a = run_episode(cfg, "passive", 2)
    b = run_episode(cfg, "proposed", 2)
    assert np.all(b.beta == 0)
    assert np.max(np.abs(a.u - b.u)) <= 1e-6


def test_monte_carlo_serial_equals_parallel_and_prefix(short):
    serial = run_monte_carlo(short, ["passive", "proposed"], n_runs=2, jobs=1)
    parallel = run_monte_carlo(short, ["passive", "proposed"], n_runs=2, jobs=2)
    strip = lambda o: (o.strategy, o.seed, o.status, o.detected, o.detection_time, o.final_volume,  # noqa: E731
                       o.tracking_cost, o.violations, o.steps_run)
    assert [repr(strip(o)) for o in serial.outcomes] == [repr(strip(o)) for o in parallel.outcomes]
    longer = run_monte_carlo(short, ["passive", "proposed"], n_runs=4, jobs=1)
    prefix = [o for o in longer.outcomes if o.seed < short.seed + 2]
    assert [repr(strip(o)) for o in prefix] == [repr(strip(o)) for o in serial.outcomes]


def test_fault_matrices_inside_initial_box(plant):
    for ev in plant.fault_events:
        assert contains(plant.AB0.to_polytope(), vec_ab(ev.A, ev.B))
    A, B = unvec_ab(plant.theta_nom, 2, 1)
    assert np.array_equal(A, plant.A_nom)
