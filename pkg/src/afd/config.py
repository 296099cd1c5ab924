"""JSON experiment configuration, validation and the built-in preset."""

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List

import numpy as np

from .errors import ParseError, ValidationError
from .excitation import BetaSchedule
from .geometry import HyperRect, Polytope, contains
from .simulator import FaultEvent, PlantConfig, disturbance_box
from .smi import box_from_matrices, unvec_ab, vec_ab
from .tube_mpc import Strategy

STRATEGY_NAMES = tuple(s.value for s in Strategy)


@dataclass(frozen=True, eq=False)
class ExperimentSpec:
    plant: PlantConfig
    strategies: List[str] = field(default_factory=lambda: list(STRATEGY_NAMES))
    n_runs: int = 120
    output_dir: str = "."
    emit: Dict[str, bool] = field(default_factory=lambda: {"records": True, "summary": True, "traces": False})

    def __eq__(self, other):
        return isinstance(other, ExperimentSpec) and to_dict(self) == to_dict(other)


def paper_sim() -> ExperimentSpec:
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.1], [1.0]])
    AB0 = box_from_matrices(
        np.array([[-0.8, -0.8], [-0.2, -0.8]]), np.array([[1.3, 1.2], [0.2, 1.2]]),
        np.array([[-0.1], [0.8]]), np.array([[0.2], [1.1]]),
    )
    faults = (
        FaultEvent(0, np.array([[1.0, 0.99], [0.0, 1.0]]), B.copy()),
        FaultEvent(10, np.array([[0.8, 0.8], [0.1, 0.9]]), np.array([[0.15], [0.95]])),
    )
    plant = PlantConfig(
        A_nom=A, B_nom=B, AB0=AB0,
        X=Polytope.from_box([-5.0, -5.0], [5.0, 5.0]),
        U=Polytope.from_box([-5.0], [5.0]),
        W=Polytope.from_box([-0.01, -0.01], [0.01, 0.01]),
        Q=0.1 * np.eye(2), R=np.array([[0.01]]), N=3,
        K=np.array([[-0.0205, -0.1916]]), x0=np.array([0.01, -0.01]),
        N_ls=20, schedule=BetaSchedule(1e-13, 1.0), pe_a=3.0,
        fault_events=faults, steps=25, seed=0,
    )
    return ExperimentSpec(plant=plant)


PRESETS = {"paper-sim": paper_sim}


# ---------------------------------------------------------------- serialization

def _poly_to_dict(P: Polytope) -> Dict[str, Any]:
    from .ellipsoids import _as_box

    box = _as_box(P)
    if box is not None:
        return {"lo": box.lo.tolist(), "hi": box.hi.tolist()}
    return {"G": P.G.tolist(), "g": P.g.tolist()}


def to_dict(spec: ExperimentSpec) -> Dict[str, Any]:
    p = spec.plant
    n, m = p.n, p.m
    A_lo, B_lo = unvec_ab(p.AB0.lo, n, m)
    A_hi, B_hi = unvec_ab(p.AB0.hi, n, m)
    plant = {
        "A_nom": np.atleast_2d(p.A_nom).tolist(),
        "B_nom": np.atleast_2d(p.B_nom).tolist(),
        "AB0": {"A_lo": A_lo.tolist(), "A_hi": A_hi.tolist(), "B_lo": B_lo.tolist(), "B_hi": B_hi.tolist()},
        "X": _poly_to_dict(p.X),
        "U": _poly_to_dict(p.U),
        "W": _poly_to_dict(p.W),
        "X_T": None if p.X_T is None else _poly_to_dict(p.X_T),
        "Q": np.atleast_2d(p.Q).tolist(),
        "R": np.atleast_2d(p.R).tolist(),
        "N": p.N,
        "K": np.atleast_2d(p.K).tolist(),
        "x0": np.ravel(p.x0).tolist(),
        "x_ref": None if p.x_ref is None else np.ravel(p.x_ref).tolist(),
        "u_ref": None if p.u_ref is None else np.ravel(p.u_ref).tolist(),
        "N_ls": p.N_ls,
        "schedule": {"V_min": p.schedule.V_min, "V_max": p.schedule.V_max, "beta_floor": p.schedule.beta_floor},
        "pe_a": p.pe_a,
        "faults": [{"step": f.step, "A": np.atleast_2d(f.A).tolist(), "B": np.atleast_2d(f.B).tolist()}
                   for f in p.fault_events],
        "steps": p.steps,
        "seed": p.seed,
        "window_cap": p.window_cap,
        "prune_period": p.prune_period,
        "passive_tube": p.passive_tube,
        "ghost_stages": p.ghost_stages,
    }
    return {"plant": plant, "strategies": list(spec.strategies), "n_runs": spec.n_runs,
            "output_dir": spec.output_dir, "emit": dict(spec.emit)}


def dumps(spec: ExperimentSpec) -> str:
    return json.dumps(to_dict(spec), indent=2, sort_keys=True)


def config_hash(spec: ExperimentSpec) -> str:
    """Hash of the plant definition; run-level settings do not change results."""
    body = json.dumps(to_dict(spec)["plant"], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(body.encode()).hexdigest()


def save(spec: ExperimentSpec, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, dumps(spec) + "\n")


# ---------------------------------------------------------------- parsing

def _matrix(obj, path, shape=None):
    try:
        M = np.array(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(path, "expected a numeric matrix") from exc
    if M.ndim == 1:
        M = M[None, :] if shape is None or shape[0] == 1 else M[:, None]
    if M.ndim != 2 or not np.all(np.isfinite(M)):
        raise ValidationError(path, "expected a finite 2-D matrix")
    if shape is not None and M.shape != shape:
        raise ValidationError(path, f"expected shape {shape}, got {M.shape}")
    return M


def _vector(obj, path, size=None):
    try:
        v = np.array(obj, dtype=float).reshape(-1)
    except (TypeError, ValueError) as exc:
        raise ValidationError(path, "expected a numeric vector") from exc
    if not np.all(np.isfinite(v)):
        raise ValidationError(path, "entries must be finite")
    if size is not None and v.size != size:
        raise ValidationError(path, f"expected length {size}, got {v.size}")
    return v


def _polytope(obj, path, dim):
    if not isinstance(obj, dict):
        raise ValidationError(path, "expected an object with lo/hi or G/g")
    if "lo" in obj and "hi" in obj:
        lo, hi = _vector(obj["lo"], f"{path}.lo", dim), _vector(obj["hi"], f"{path}.hi", dim)
        if np.any(lo > hi):
            raise ValidationError(path, "lo must not exceed hi")
        return Polytope.from_box(lo, hi)
    if "G" in obj and "g" in obj:
        G = _matrix(obj["G"], f"{path}.G")
        g = _vector(obj["g"], f"{path}.g", G.shape[0])
        if G.shape[1] != dim:
            raise ValidationError(f"{path}.G", f"expected {dim} columns")
        return Polytope(G, g)
    raise ValidationError(path, "expected keys lo/hi or G/g")


def _spd(M, path):
    if not np.allclose(M, M.T, atol=1e-12) or np.linalg.eigvalsh(0.5 * (M + M.T)).min() <= 0:
        raise ValidationError(path, "must be symmetric positive definite")


def _get(d, key, path, default=...):
    if key in d:
        return d[key]
    if default is ...:
        raise ValidationError(f"{path}.{key}" if path else key, "missing")
    return default


def from_dict(raw: Dict[str, Any]) -> ExperimentSpec:
    if not isinstance(raw, dict):
        raise ValidationError("$", "top level must be an object")
    p = _get(raw, "plant", "")
    if not isinstance(p, dict):
        raise ValidationError("plant", "must be an object")
    A = _matrix(_get(p, "A_nom", "plant"), "plant.A_nom")
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValidationError("plant.A_nom", "must be square")
    B = _matrix(_get(p, "B_nom", "plant"), "plant.B_nom", None)
    if B.shape[0] != n:
        B = B.T if B.shape[1] == n else B
    if B.shape[0] != n:
        raise ValidationError("plant.B_nom", f"expected {n} rows")
    m = B.shape[1]
    ab = _get(p, "AB0", "plant")
    if not isinstance(ab, dict):
        raise ValidationError("plant.AB0", "must be an object")
    AB0 = box_from_matrices(
        _matrix(_get(ab, "A_lo", "plant.AB0"), "plant.AB0.A_lo", (n, n)),
        _matrix(_get(ab, "A_hi", "plant.AB0"), "plant.AB0.A_hi", (n, n)),
        _matrix(_get(ab, "B_lo", "plant.AB0"), "plant.AB0.B_lo", (n, m)),
        _matrix(_get(ab, "B_hi", "plant.AB0"), "plant.AB0.B_hi", (n, m)),
    )
    if np.any(AB0.lo > AB0.hi):
        raise ValidationError("plant.AB0", "lower bounds exceed upper bounds")
    Q = _matrix(_get(p, "Q", "plant"), "plant.Q", (n, n))
    R = _matrix(_get(p, "R", "plant"), "plant.R", (m, m))
    _spd(Q, "plant.Q")
    _spd(R, "plant.R")
    N = _get(p, "N", "plant")
    if not isinstance(N, int) or N < 1:
        raise ValidationError("plant.N", "must be a positive integer")
    W = _polytope(_get(p, "W", "plant"), "plant.W", n)
    try:
        disturbance_box(W)
    except Exception as exc:
        raise ValidationError("plant.W", "must be an axis-aligned box") from exc
    X_T_raw = p.get("X_T")
    sched = p.get("schedule", {})
    try:
        schedule = BetaSchedule(float(sched.get("V_min", 1e-13)), float(sched.get("V_max", 1.0)),
                                float(sched.get("beta_floor", 0.0)))
    except ValidationError as exc:
        raise ValidationError("plant.schedule", exc.message) from exc
    faults = []
    for i, f in enumerate(p.get("faults", [])):
        fp = f"plant.faults[{i}]"
        step = _get(f, "step", fp)
        if not isinstance(step, int) or step < 0:
            raise ValidationError(f"{fp}.step", "must be a nonnegative integer")
        faults.append(FaultEvent(step, _matrix(_get(f, "A", fp), f"{fp}.A", (n, n)),
                                 _matrix(_get(f, "B", fp), f"{fp}.B", (n, m))))
    faults.sort(key=lambda e: e.step)
    steps = p.get("steps", 25)
    if not isinstance(steps, int) or steps < 1:
        raise ValidationError("plant.steps", "must be a positive integer")
    ghost = p.get("ghost_stages", 1)
    if not isinstance(ghost, int) or isinstance(ghost, bool) or ghost < 0:
        raise ValidationError("plant.ghost_stages", "must be a nonnegative integer")
    passive_tube = p.get("passive_tube", "initial")
    if passive_tube not in ("initial", "current"):
        raise ValidationError("plant.passive_tube", "must be 'initial' or 'current'")
    x_ref, u_ref = p.get("x_ref"), p.get("u_ref")
    plant = PlantConfig(
        A_nom=A, B_nom=B, AB0=AB0,
        X=_polytope(_get(p, "X", "plant"), "plant.X", n),
        U=_polytope(_get(p, "U", "plant"), "plant.U", m),
        W=W, Q=Q, R=R, N=N,
        K=_matrix(_get(p, "K", "plant"), "plant.K", (m, n)),
        x0=_vector(_get(p, "x0", "plant"), "plant.x0", n),
        N_ls=int(p.get("N_ls", 20)), schedule=schedule, pe_a=float(p.get("pe_a", 3.0)),
        fault_events=tuple(faults), steps=steps, seed=int(p.get("seed", 0)),
        X_T=None if X_T_raw is None else _polytope(X_T_raw, "plant.X_T", n),
        x_ref=None if x_ref is None else _vector(x_ref, "plant.x_ref", n),
        u_ref=None if u_ref is None else _vector(u_ref, "plant.u_ref", m),
        window_cap=int(p.get("window_cap", 40)), prune_period=int(p.get("prune_period", 5)),
        passive_tube=passive_tube, ghost_stages=ghost,
    )
    if not contains(AB0.to_polytope(), vec_ab(A, B)):
        raise ValidationError("plant.AB0", "nominal parameters lie outside the initial set")
    strategies = raw.get("strategies", list(STRATEGY_NAMES))
    for i, s in enumerate(strategies):
        if s not in STRATEGY_NAMES:
            raise ValidationError(f"strategies[{i}]", f"unknown strategy {s!r}")
    n_runs = raw.get("n_runs", 120)
    if not isinstance(n_runs, int) or n_runs < 1:
        raise ValidationError("n_runs", "must be a positive integer")
    emit = raw.get("emit", {"records": True, "summary": True, "traces": False})
    return ExperimentSpec(plant=plant, strategies=list(strategies), n_runs=n_runs,
                          output_dir=str(raw.get("output_dir", ".")), emit=dict(emit))


def fault_warnings(spec: ExperimentSpec) -> List[str]:
    """Faults whose parameters fall outside the initial set (the identifier then shuts down)."""
    P = spec.plant.AB0.to_polytope()
    return [f"fault at step {f.step} lies outside the initial parameter set"
            for f in spec.plant.fault_events if not contains(P, vec_ab(f.A, f.B))]


def loads(text: str) -> ExperimentSpec:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    return from_dict(raw)


def load_config(path) -> ExperimentSpec:
    name = str(path)
    if name in PRESETS:
        return PRESETS[name]()
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())
