"""Closed-loop simulation with fault injection and the Monte Carlo harness.

Time indexing: the input at step ``k`` is computed from ``x_k``; the
transition ``k -> k+1`` follows the fault active at ``k`` and reaches the
identifier at step ``k + 1``.  A detection at step ``j`` for a fault with
onset ``s`` therefore has detection time ``j - s`` and the earliest possible
value is 1.
"""

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .ellipsoids import _as_box
from .errors import NotABox, ValidationError
from .excitation import BetaSchedule, ExcitationHistory, beta
from .geometry import HyperRect, Polytope, contains
from .smi import (
    Cause,
    ModelEstimate,
    SmiState,
    check_shutdown,
    current_model,
    param_volume,
    smi_update,
    vec_ab,
)
from .tube_mpc import OcpStatus, Strategy, build_ocp, precompute_tube, solve_with_backoff

RNG_NAME = "numpy.random.PCG64"
STRATEGIES = (Strategy.PASSIVE, Strategy.ADAPTIVE_PE, Strategy.PROPOSED)


@dataclass(frozen=True)
class FaultEvent:
    step: int
    A: np.ndarray
    B: np.ndarray


@dataclass(frozen=True, eq=False)
class PlantConfig:
    A_nom: np.ndarray
    B_nom: np.ndarray
    AB0: HyperRect
    X: Polytope
    U: Polytope
    W: Polytope
    Q: np.ndarray
    R: np.ndarray
    N: int
    K: np.ndarray
    x0: np.ndarray
    N_ls: int = 20
    schedule: BetaSchedule = field(default_factory=BetaSchedule)
    pe_a: float = 3.0
    fault_events: Tuple[FaultEvent, ...] = ()
    steps: int = 25
    seed: int = 0
    X_T: Optional[Polytope] = None
    x_ref: Optional[np.ndarray] = None
    u_ref: Optional[np.ndarray] = None
    window_cap: int = 40
    prune_period: int = 5
    # "initial" keeps the passive tube on AB0, "current" follows the identifier
    passive_tube: str = "initial"
    # constraint-only stages appended to the horizon
    ghost_stages: int = 1

    @property
    def n(self) -> int:
        return np.atleast_2d(self.A_nom).shape[0]

    @property
    def m(self) -> int:
        return np.atleast_2d(self.B_nom).shape[1]

    @property
    def tube_set(self) -> Polytope:
        return self.X_T if self.X_T is not None else Polytope.from_box(-np.ones(self.n), np.ones(self.n))

    @property
    def theta_nom(self) -> np.ndarray:
        return vec_ab(self.A_nom, self.B_nom)


def plant_step(A, B, x, u, w) -> np.ndarray:
    return np.atleast_2d(A) @ np.ravel(x) + np.atleast_2d(B) @ np.ravel(u) + np.ravel(w)


def disturbance_box(W) -> HyperRect:
    if isinstance(W, HyperRect):
        return W
    box = _as_box(W)
    if box is None:
        raise NotABox("disturbance set must be an axis-aligned box for sampling")
    return box


def sample_disturbance(W, rng, size=None) -> np.ndarray:
    box = disturbance_box(W)
    shape = box.dim if size is None else (size, box.dim)
    return rng.uniform(box.lo, box.hi, size=shape)


def fault_at(schedule: Sequence[FaultEvent], step: int, nominal=None):
    """Matrices of the latest event with ``event.step <= step``; later entries win ties."""
    chosen = nominal
    best = None
    for ev in schedule:
        if ev.step <= step and (best is None or ev.step >= best):
            chosen, best = (ev.A, ev.B), ev.step
    return chosen


def fault_index(schedule: Sequence[FaultEvent], step: int) -> int:
    """1-based index of the active fault event, 0 when nominal."""
    idx, best = 0, None
    for i, ev in enumerate(schedule):
        if ev.step <= step and (best is None or ev.step >= best):
            idx, best = i + 1, ev.step
    return idx


@dataclass
class RunRecord:
    strategy: str
    seed: int
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    beta: np.ndarray
    volume: np.ndarray
    fault_flag: np.ndarray
    detected: np.ndarray
    ocp_status: List[str]
    ocp_iterations: List[int]
    detection_events: list
    shutdown: np.ndarray
    volume_after: np.ndarray
    x_final: np.ndarray
    truncated_at: Optional[int]
    status: str
    wall_time: float
    pe_relaxed: int = 0

    @property
    def n_steps(self) -> int:
        return self.x.shape[0]


def run_episode(cfg: PlantConfig, strategy, seed: Optional[int] = None) -> RunRecord:
    strategy = Strategy(strategy)
    seed = cfg.seed if seed is None else seed
    t_start = time.perf_counter()
    n, m = cfg.n, cfg.m
    rng = np.random.Generator(np.random.PCG64(seed))
    w_seq = sample_disturbance(cfg.W, rng, size=cfg.steps)
    AB0 = cfg.AB0.to_polytope()
    theta_nom = cfg.theta_nom
    nominal = ModelEstimate(np.atleast_2d(cfg.A_nom), np.atleast_2d(cfg.B_nom))
    K = np.atleast_2d(cfg.K)
    S = SmiState.initial(AB0, n, m, theta_nom, n_ls=cfg.N_ls, prune_period=cfg.prune_period)
    hist = ExcitationHistory(window_cap=cfg.window_cap)
    x = np.asarray(cfg.x0, dtype=float).copy()
    hist.start(x)
    X_T = cfg.tube_set

    xs, us, vs, betas, vols, faults, dets, stats, iters, shut = ([] for _ in range(10))
    vol_after = [param_volume(S)]
    recent: List[np.ndarray] = []
    truncated = None
    status = "Completed"
    pe_relaxed = 0
    x_prev = u_prev = None
    passive_td = None

    for k in range(cfg.steps):
        if k >= 1:
            S = smi_update(S, x_prev, u_prev, x, cfg.W, theta_nom, AB0, step=k)
            vol_after.append(param_volume(S))
            if S.reset_at_last_update:
                hist.reset(keep_last=1)
        V = param_volume(S)
        if strategy is Strategy.PASSIVE:
            model = nominal
        else:
            model = current_model(S, nominal)
        shut.append(check_shutdown(model, AB0))
        b = beta(V, cfg.schedule) if strategy is Strategy.PROPOSED else 0.0
        if strategy is Strategy.PASSIVE and cfg.passive_tube == "initial":
            if passive_td is None:
                passive_td = precompute_tube(X_T, K, cfg.X, cfg.U, cfg.W, cfg.AB0)
            td = passive_td
        else:
            td = precompute_tube(X_T, K, cfg.X, cfg.U, cfg.W, S.param_box)
        def build(h, td=td, x=x, model=model, b=b):
            return build_ocp(td, x, cfg.N, model.A_hat, model.B_hat, cfg.Q, cfg.R, cfg.x_ref, cfg.u_ref,
                             ghost=h, beta=b, history=hist, W=cfg.W, recent_inputs=list(recent),
                             pe_a=cfg.pe_a)

        sol = solve_with_backoff(build, strategy, cfg.ghost_stages)
        if sol.status is OcpStatus.INFEASIBLE:
            truncated = k
            status = OcpStatus.INFEASIBLE.value
            break
        pe_relaxed += int(sol.pe_relaxed)
        v0 = sol.v_seq[0]
        u = K @ x + v0
        A_true, B_true = fault_at(cfg.fault_events, k, (nominal.A_hat, nominal.B_hat))
        x_next = plant_step(A_true, B_true, x, u, w_seq[k])
        xs.append(x)
        us.append(u)
        vs.append(v0)
        betas.append(b)
        vols.append(V)
        faults.append(fault_index(cfg.fault_events, k))
        dets.append(S.fault_detected)
        stats.append(sol.status.value)
        iters.append(sol.iterations)
        hist.push(u, x_next)
        recent.append(u)
        x_prev, u_prev, x = x, u, x_next

    if truncated is None:
        S = smi_update(S, x_prev, u_prev, x, cfg.W, theta_nom, AB0, step=cfg.steps)
        vol_after.append(param_volume(S))

    def arr(seq, width):
        return np.array(seq, dtype=float).reshape(len(seq), width)

    return RunRecord(
        strategy=strategy.value, seed=seed, x=arr(xs, n), u=arr(us, m), v=arr(vs, m),
        beta=np.array(betas, dtype=float), volume=np.array(vols, dtype=float),
        fault_flag=np.array(faults, dtype=int), detected=np.array(dets, dtype=bool),
        ocp_status=stats, ocp_iterations=iters, detection_events=list(S.detection_log),
        shutdown=np.array(shut, dtype=bool), volume_after=np.array(vol_after, dtype=float),
        x_final=x, truncated_at=truncated, status=status,
        wall_time=time.perf_counter() - t_start, pe_relaxed=pe_relaxed,
    )


# ---------------------------------------------------------------- metrics

def fault_windows(cfg: PlantConfig) -> List[Tuple[int, int, int]]:
    """``(onset, first_update_step, last_update_step)`` for each fault event."""
    onsets = sorted(ev.step for ev in cfg.fault_events)
    out = []
    for i, s in enumerate(onsets):
        end = onsets[i + 1] if i + 1 < len(onsets) else cfg.steps
        out.append((s, s + 1, end))
    return out


@dataclass
class EpisodeOutcome:
    strategy: str
    seed: int
    status: str
    detected: List[bool]
    detection_time: List[float]
    final_volume: List[float]
    tracking_cost: float
    violations: int
    steps_run: int
    wall_time: float


def _violations(cfg: PlantConfig, rec: RunRecord) -> int:
    count = 0
    for x in rec.x:
        count += int(not contains(cfg.X, x, 1e-9))
    for u in rec.u:
        count += int(not contains(cfg.U, u, 1e-9))
    if rec.truncated_at is None:
        count += int(not contains(cfg.X, rec.x_final, 1e-9))
    return count


def episode_outcome(cfg: PlantConfig, rec: RunRecord) -> EpisodeOutcome:
    detected, times, finals = [], [], []
    for onset, first, last in fault_windows(cfg):
        hits = [ev.step for ev in rec.detection_events if first <= ev.step <= last]
        detected.append(bool(hits))
        times.append(float(min(hits) - onset) if hits else float("nan"))
        idx = min(last, rec.volume_after.size - 1)
        finals.append(float(rec.volume_after[idx]))
    x_ref = np.zeros(cfg.n) if cfg.x_ref is None else np.asarray(cfg.x_ref)
    u_ref = np.zeros(cfg.m) if cfg.u_ref is None else np.asarray(cfg.u_ref)
    Q, R = np.atleast_2d(cfg.Q), np.atleast_2d(cfg.R)
    cost = 0.0
    for x, u in zip(rec.x, rec.u):
        dx, du = x - x_ref, u - u_ref
        cost += float(dx @ Q @ dx + du @ R @ du)
    return EpisodeOutcome(rec.strategy, rec.seed, rec.status, detected, times, finals, cost,
                          _violations(cfg, rec), rec.n_steps, rec.wall_time)


@dataclass
class MetricsSummary:
    """Per fault and strategy: detection time, rate, final volume and more."""

    n_faults: int
    strategies: List[str]
    detection_time: Dict[Tuple[int, str], float]
    detection_rate: Dict[Tuple[int, str], float]
    final_volume: Dict[Tuple[int, str], float]
    tracking_cost: Dict[str, float]
    violations: Dict[str, int]
    run_count: Dict[str, int]
    failures: Dict[str, int]
    outcomes: List[EpisodeOutcome]


def summarize(cfg: PlantConfig, outcomes: List[EpisodeOutcome], strategies: Sequence[str]) -> MetricsSummary:
    n_f = len(cfg.fault_events)
    dt, dr, fv = {}, {}, {}
    tc, vio, cnt, fail = {}, {}, {}, {}
    for s in strategies:
        mine = [o for o in outcomes if o.strategy == s]
        cnt[s] = len(mine)
        fail[s] = sum(o.status != "Completed" for o in mine)
        vio[s] = sum(o.violations for o in mine)
        tc[s] = float(np.mean([o.tracking_cost for o in mine])) if mine else float("nan")
        for f in range(n_f):
            det = [o for o in mine if o.detected[f]]
            dr[(f, s)] = len(det) / len(mine) if mine else float("nan")
            dt[(f, s)] = float(np.mean([o.detection_time[f] for o in det])) if det else float("nan")
            fv[(f, s)] = float(np.mean([o.final_volume[f] for o in mine])) if mine else float("nan")
    return MetricsSummary(n_f, list(strategies), dt, dr, fv, tc, vio, cnt, fail, outcomes)


def _run_one(args):
    cfg, strategy, seed = args
    rec = run_episode(cfg, strategy, seed)
    return episode_outcome(cfg, rec)


def run_monte_carlo(cfg: PlantConfig, strategies=STRATEGIES, n_runs: int = 120,
                    jobs: Optional[int] = None, base_seed: Optional[int] = None) -> MetricsSummary:
    if n_runs < 1:
        raise ValidationError("n_runs", "must be at least 1")
    base = cfg.seed if base_seed is None else base_seed
    names = [Strategy(s).value for s in strategies]
    tasks = [(cfg, s, base + i) for s in names for i in range(n_runs)]
    jobs = jobs if jobs is not None else int(os.environ.get("AFD_JOBS", "1"))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        outcomes = [_run_one(t) for t in tasks]
    return summarize(cfg, outcomes, names)
