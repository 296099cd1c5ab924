"""Homothetic tube robust MPC with passive, PE-constrained and volume-penalizing variants.

The decision vector is ``d = [v_0..v_{N-1}, z_1..z_N, alpha_1..alpha_N]``;
``z_0`` is the measured state and ``alpha_0 = 0``.  Inputs are parameterized
as ``u = K x + v``.  Robust tube propagation is enforced at every corner of
the bounding box of the current parameter set.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, List, Optional, Sequence

import numpy as np

from .ellipsoids import _as_box, polytope_vertices_2d
from .errors import DimensionMismatch, NotPositiveDefinite, UnboundedTubeShape
from .excitation import ExcitationHistory, VolumeCost
from .geometry import HyperRect, LpStatus, Polytope, box_vertices, solve_lp
from .qp import QpStatus, solve_qp
from .smi import unvec_ab

REG_EPS = 1e-6
FD_STEP = 1e-5
SQP_STEP_TOL = 1e-7
SQP_MAX_ITER = 50
FEAS_CHECK_TOL = 1e-7
PE_REACH_SLACK = 1e-7


class Strategy(str, Enum):
    PASSIVE = "passive"
    ADAPTIVE_PE = "adaptive_pe"
    PROPOSED = "proposed"


class OcpStatus(str, Enum):
    SOLVED = "Solved"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"


def _support(P: Polytope, direction) -> float:
    d = np.asarray(direction, dtype=float).reshape(-1)
    box = _as_box(P)
    if box is not None:
        return float(np.sum(np.maximum(d * box.hi, d * box.lo)))
    sol = solve_lp(-d, P)
    if sol.status is LpStatus.UNBOUNDED:
        raise UnboundedTubeShape("tube cross-section is unbounded")
    if sol.status is not LpStatus.OPTIMAL:
        raise UnboundedTubeShape("tube cross-section is empty")
    return -sol.objective


@dataclass(frozen=True, eq=False)
class TubeData:
    X_T: Polytope
    K: np.ndarray
    X: Polytope
    U: Polytope
    h_x: np.ndarray
    h_u: np.ndarray
    w_support: np.ndarray
    param_vertices: List[tuple]
    xT_vertices: np.ndarray
    # per G_T row: unique projected parameter rows [G_T_i A, G_T_i B]
    projected: List[np.ndarray] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.K.shape[1]

    @property
    def m(self) -> int:
        return self.K.shape[0]


def _tube_vertices(X_T: Polytope) -> np.ndarray:
    box = _as_box(X_T)
    if box is not None:
        return np.array(box_vertices(box))
    if X_T.dim == 2:
        return polytope_vertices_2d(X_T)
    raise UnboundedTubeShape("only boxes or planar polytopes are supported as tube cross-sections")


def precompute_tube(X_T: Polytope, K, X: Polytope, U: Polytope, W: Polytope, param_box: HyperRect) -> TubeData:
    K = np.atleast_2d(np.asarray(K, dtype=float))
    m, n = K.shape
    if X_T.dim != n or X.dim != n or W.dim != n or U.dim != m:
        raise DimensionMismatch("tube, state, input or disturbance set has the wrong dimension")
    if param_box.dim != n * (n + m):
        raise DimensionMismatch("parameter box has the wrong dimension")
    if np.any(X_T.g <= 0):
        raise UnboundedTubeShape("tube cross-section must contain the origin in its interior")
    for i in range(n):
        for s in (1.0, -1.0):
            _support(X_T, s * np.eye(n)[i])
    h_x = np.array([_support(X_T, row) for row in X.G])
    h_u = np.array([_support(X_T, row @ K) for row in U.G])
    w_support = np.array([_support(W, row) for row in X_T.G])
    verts = [unvec_ab(v, n, m) for v in box_vertices(param_box)]
    AB = np.array([np.hstack([A, B]) for A, B in verts])
    projected = []
    for row in X_T.G:
        P = np.einsum("j,vjk->vk", row, AB)
        projected.append(np.unique(np.round(P, 15), axis=0))
    return TubeData(X_T=X_T, K=K, X=X, U=U, h_x=h_x, h_u=h_u, w_support=w_support,
                    param_vertices=verts, xT_vertices=_tube_vertices(X_T), projected=projected)


class Layout:
    def __init__(self, n: int, m: int, N: int):
        self.n, self.m, self.N = n, m, N
        self.size = N * (m + n + 1)

    def v(self, l: int) -> slice:
        return slice(l * self.m, (l + 1) * self.m)

    def z(self, l: int) -> slice:
        """Stage ``l`` in ``1..N``."""
        o = self.N * self.m + (l - 1) * self.n
        return slice(o, o + self.n)

    def a(self, l: int) -> int:
        return self.N * (self.m + self.n) + (l - 1)

    def split(self, d):
        d = np.asarray(d)
        v = d[: self.N * self.m].reshape(self.N, self.m)
        z = d[self.N * self.m: self.N * (self.m + self.n)].reshape(self.N, self.n)
        alpha = d[self.N * (self.m + self.n):]
        return v, z, alpha


def affine_rows(td: TubeData, N: int):
    """Rows ``(A, b0, E)`` such that the tube constraints read ``A d <= b0 - E x_k``."""
    n, m = td.n, td.m
    L = Layout(n, m, N)
    K = td.K
    Gx, gx = td.X.G, td.X.g
    Gu, gu = td.U.G, td.U.g
    GT, gT = td.X_T.G, td.X_T.g
    blocks, rhs, dep = [], [], []

    def new(rows):
        return np.zeros((rows, L.size))

    for l in range(1, N + 1):
        R = new(Gx.shape[0])
        R[:, L.z(l)] = Gx
        R[:, L.a(l)] = td.h_x
        blocks.append(R)
        rhs.append(gx)
        dep.append(np.zeros((Gx.shape[0], n)))
    for l in range(N):
        R = new(Gu.shape[0])
        R[:, L.v(l)] = Gu
        if l == 0:
            dep.append(Gu @ K)
        else:
            R[:, L.z(l)] = Gu @ K
            R[:, L.a(l)] = td.h_u
            dep.append(np.zeros((Gu.shape[0], n)))
        blocks.append(R)
        rhs.append(gu)
    verts = td.xT_vertices
    for l in range(N):
        for i, P in enumerate(td.projected):
            a_rows, b_rows = P[:, :n], P[:, n:]
            c = a_rows + b_rows @ K
            R = new(P.shape[0])
            R[:, L.v(l)] = b_rows
            R[:, L.z(l + 1)] = -GT[i]
            R[:, L.a(l + 1)] = -gT[i]
            if l == 0:
                dep.append(c)
            else:
                R[:, L.z(l)] = c
                R[:, L.a(l)] = np.max(c @ verts.T, axis=1)
                dep.append(np.zeros((P.shape[0], n)))
            blocks.append(R)
            rhs.append(np.full(P.shape[0], -td.w_support[i]))
    R = new(N)
    for l in range(1, N + 1):
        R[l - 1, L.a(l)] = -1.0
    blocks.append(R)
    rhs.append(np.zeros(N))
    dep.append(np.zeros((N, n)))
    return np.vstack(blocks), np.concatenate(rhs), np.vstack(dep)


def tube_constraint_rows(td: TubeData, x_k, N: int):
    """Rows ``(A, b, stage0_ok)`` with ``A d <= b`` over the decision vector.

    ``stage0_ok`` reports whether the measured state itself satisfies the
    state constraints, which involves no decision variable.
    """
    x_k = np.asarray(x_k, dtype=float).reshape(-1)
    A, b0, E = affine_rows(td, N)
    stage0_ok = bool(np.all(td.X.G @ x_k <= td.X.g + FEAS_CHECK_TOL))
    return A, b0 - E @ x_k, stage0_ok


def nominal_predict(A_hat, B_hat, K, x_k, v_seq) -> np.ndarray:
    """States ``x_1..x_N`` under ``u = K x + v`` and the nominal model."""
    A, B, K = np.atleast_2d(A_hat), np.atleast_2d(B_hat), np.atleast_2d(K)
    x = np.asarray(x_k, dtype=float).reshape(-1)
    V = np.asarray(v_seq, dtype=float).reshape(-1, B.shape[1])
    Phi = A + B @ K
    out = np.empty((V.shape[0], x.size))
    for l, v in enumerate(V):
        x = Phi @ x + B @ v
        out[l] = x
    return out


def _check_pd(M, name):
    M = np.atleast_2d(M)
    if not np.allclose(M, M.T) or np.linalg.eigvalsh(0.5 * (M + M.T)).min() <= 0:
        raise NotPositiveDefinite(f"{name} must be symmetric positive definite")


def tracking_cost(x_pred, v_seq, refs, Q, R, K) -> float:
    """Sum over stages ``0..N-1`` of ``|x - x_ref|_Q^2 + |K x + v - u_ref|_R^2``.

    ``x_pred`` holds the states ``x_0..x_{N-1}``.
    """
    Q, R, K = np.atleast_2d(Q), np.atleast_2d(R), np.atleast_2d(K)
    X = np.atleast_2d(np.asarray(x_pred, dtype=float))
    V = np.asarray(v_seq, dtype=float).reshape(X.shape[0], -1)
    x_ref, u_ref = refs
    total = 0.0
    for x, v in zip(X, V):
        dx = x - x_ref
        du = K @ x + v - u_ref
        total += float(dx @ Q @ dx + du @ R @ du)
    return total


def pe_margin(recent_inputs: Sequence, a: float, n: int) -> float:
    """Smallest eigenvalue of the input Gram sum over the last ``n + 1`` inputs, minus ``a``."""
    U = [np.atleast_1d(np.asarray(u, dtype=float)) for u in recent_inputs][-(n + 1):]
    if not U:
        return -float(a)
    m = U[0].size
    S = np.zeros((m, m))
    for u in U:
        S += np.outer(u, u)
    return float(np.linalg.eigvalsh(S).min() - a)


@dataclass
class TubeOcp:
    td: TubeData
    x_k: np.ndarray
    N: int
    A_hat: np.ndarray
    B_hat: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray
    A_rows: np.ndarray
    b_rows: np.ndarray
    stage0_ok: bool
    H: np.ndarray
    f: np.ndarray
    c0: float
    layout: Layout
    beta: float = 0.0
    history: Optional[ExcitationHistory] = None
    W: Optional[Polytope] = None
    recent_inputs: List[np.ndarray] = field(default_factory=list)
    pe_a: float = 0.0
    reg_eps: float = REG_EPS
    ghost: int = 0
    _vc: Any = field(default=None, repr=False)

    @property
    def model(self):
        return _Model(self.A_hat, self.B_hat)

    def tracking(self, d) -> float:
        v = self.layout.split(d)[0][: self.N]
        X = np.vstack([self.x_k, nominal_predict(self.A_hat, self.B_hat, self.td.K, self.x_k, v)[:-1]])
        return tracking_cost(X, v, (self.x_ref, self.u_ref), self.Q, self.R, self.td.K)

    def quad(self, d) -> float:
        """Tracking cost plus the tube regularizer, as the QP sees it."""
        return float(0.5 * d @ self.H @ d + self.f @ d + self.c0)

    def volume(self, d) -> float:
        if self._vc is None:
            self._vc = VolumeCost(self.history, self.model, self.td.K, self.W)
        v = self.layout.split(d)[0][: self.N]
        return self._vc(v)[0]


@dataclass
class _Model:
    A_hat: np.ndarray
    B_hat: np.ndarray


def build_ocp(td: TubeData, x_k, N: int, A_hat, B_hat, Q, R, x_ref=None, u_ref=None,
              reg_eps: float = REG_EPS, ghost: int = 0, **extra) -> TubeOcp:
    """Assemble the OCP; ``ghost`` extra stages carry constraints but no cost."""
    x_k = np.asarray(x_k, dtype=float).reshape(-1)
    A, B, K = np.atleast_2d(A_hat), np.atleast_2d(B_hat), td.K
    Q, R = np.atleast_2d(Q), np.atleast_2d(R)
    n, m = B.shape
    L = Layout(n, m, N + ghost)
    x_ref = np.zeros(n) if x_ref is None else np.asarray(x_ref, dtype=float)
    u_ref = np.zeros(m) if u_ref is None else np.asarray(u_ref, dtype=float)
    Phi = A + B @ K
    # stacked x_0..x_{N-1} = Sx x_k + Sv v
    Sx = np.zeros((N * n, n))
    Sv = np.zeros((N * n, N * m))
    P = np.eye(n)
    for l in range(N):
        Sx[l * n:(l + 1) * n] = P
        P = Phi @ P
        for j in range(l):
            Sv[l * n:(l + 1) * n, j * m:(j + 1) * m] = np.linalg.matrix_power(Phi, l - 1 - j) @ B
    Qb = np.kron(np.eye(N), Q)
    Rb = np.kron(np.eye(N), R)
    Kb = np.kron(np.eye(N), K)
    Su = Kb @ Sv + np.eye(N * m)
    ex = Sx @ x_k - np.tile(x_ref, N)
    eu = Kb @ Sx @ x_k - np.tile(u_ref, N)
    nv = N * m
    H = 2.0 * reg_eps * np.eye(L.size)
    f = np.zeros(L.size)
    H[:nv, :nv] = 2.0 * (Sv.T @ Qb @ Sv + Su.T @ Rb @ Su)
    f[:nv] = 2.0 * (Sv.T @ Qb @ ex + Su.T @ Rb @ eu)
    c0 = float(ex @ Qb @ ex + eu @ Rb @ eu)
    A_rows, b_rows, ok = tube_constraint_rows(td, x_k, N + ghost)
    return TubeOcp(td=td, x_k=x_k, N=N, A_hat=A, B_hat=B, Q=Q, R=R, x_ref=x_ref, u_ref=u_ref,
                   A_rows=A_rows, b_rows=b_rows, stage0_ok=ok, H=H, f=f, c0=c0, layout=L,
                   reg_eps=reg_eps, ghost=ghost, **extra)


@dataclass
class OcpSolution:
    v_seq: np.ndarray
    z_seq: np.ndarray
    alpha_seq: np.ndarray
    cost_total: float
    cost_tracking: float
    cost_volume: float
    status: OcpStatus
    iterations: int
    d: Optional[np.ndarray] = None
    pe_relaxed: bool = False
    ghost: int = 0
    fallback: bool = False
    merit_trace: List[float] = field(default_factory=list)

    @property
    def v0(self) -> np.ndarray:
        return self.v_seq[0]


def _infeasible(ocp: TubeOcp, it: int = 0) -> OcpSolution:
    L = ocp.layout
    nan = np.full(L.size, np.nan)
    v, z, a = L.split(nan)
    return OcpSolution(v, z, a, np.nan, np.nan, np.nan, OcpStatus.INFEASIBLE, it, None)


def _package(ocp: TubeOcp, d, status, it, J=0.0, **kw) -> OcpSolution:
    v, z, a = ocp.layout.split(d)
    trk = ocp.tracking(d)
    return OcpSolution(v.copy(), z.copy(), a.copy(), trk + ocp.beta * J, trk, J, status, it, d.copy(),
                       ghost=ocp.ghost, **kw)


def _qp(ocp: TubeOcp, H, f, extra_A=None, extra_b=None):
    A, b = ocp.A_rows, ocp.b_rows
    if extra_A is not None:
        A = np.vstack([A, extra_A])
        b = np.concatenate([b, extra_b])
    return solve_qp(H, f, A, b)


def _solve_plain(ocp: TubeOcp):
    return _qp(ocp, ocp.H, ocp.f)


def _solve_pe(ocp: TubeOcp):
    """Two-sided convexification of the excitation constraint on ``u_0``.

    Returns ``(result, relaxed)``.  When neither side can reach the bound,
    ``relaxed`` is set and ``u_0`` is pushed to the largest excitation the
    constraints admit on the cheaper side.
    """
    L, td = ocp.layout, ocp.td
    m, n = td.m, td.n
    past = [np.atleast_1d(u) for u in ocp.recent_inputs][-n:] if n > 0 else []
    if m == 1:
        level = ocp.pe_a - sum(float(u @ u) for u in past)
        direction = np.ones(1)
    else:
        S = sum((np.outer(u, u) for u in past), np.zeros((m, m)))
        level = ocp.pe_a - float(np.linalg.eigvalsh(S).min())
        base = _solve_plain(ocp)
        u0 = td.K @ ocp.x_k + (base.x[L.v(0)] if base.status is QpStatus.SOLVED else 0.0)
        nrm = np.linalg.norm(u0)
        direction = u0 / nrm if nrm > 0 else np.eye(m)[0]
    bound = np.sqrt(max(0.0, level))
    if bound == 0.0:
        return _solve_plain(ocp), False
    Ku = float(direction @ (td.K @ ocp.x_k))

    def sided(bounds):
        best = None
        for sgn, bd in zip((1.0, -1.0), bounds):
            if bd is None:
                continue
            row = np.zeros((1, L.size))
            # sgn * direction^T u_0 >= bd
            row[0, L.v(0)] = -sgn * direction
            r = _qp(ocp, ocp.H, ocp.f, row, np.array([-bd + sgn * Ku]))
            if r.status is QpStatus.SOLVED and (best is None or r.objective < best.objective):
                best = r
        return best

    best = sided((bound, bound))
    if best is not None:
        return best, False
    # neither side reaches the bound: push u_0 as far as the constraints allow
    P = Polytope(ocp.A_rows, ocp.b_rows)
    reach = []
    for sgn in (1.0, -1.0):
        cost = np.zeros(L.size)
        cost[L.v(0)] = -sgn * direction
        lp = solve_lp(cost, P)
        if lp.status is LpStatus.OPTIMAL:
            top = -lp.objective + sgn * Ku
            reach.append(top - PE_REACH_SLACK * max(1.0, abs(top)))
        else:
            reach.append(None)
    best = sided(reach)
    return (best if best is not None else _solve_plain(ocp)), True


def _grad_v(ocp: TubeOcp, d, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the volume cost over the ``v`` entries of ``d``."""
    nv = ocp.N * ocp.td.m
    g = np.zeros(nv)
    for i in range(nv):
        dp = d.copy()
        dm = d.copy()
        dp[i] += h
        dm[i] -= h
        g[i] = (ocp.volume(dp) - ocp.volume(dm)) / (2.0 * h)
    return g


def _sqp(ocp: TubeOcp, d0: np.ndarray, it0: int):
    nv = ocp.N * ocp.td.m
    beta = ocp.beta

    def merit(d):
        return ocp.quad(d) + beta * ocp.volume(d)

    d = d0.copy()
    m_cur = merit(d)
    trace = [m_cur]
    Bv = np.zeros((nv, nv))
    g = _grad_v(ocp, d)
    it = it0
    status = OcpStatus.MAX_ITER
    for _ in range(SQP_MAX_ITER):
        it += 1
        H = ocp.H.copy()
        H[:nv, :nv] += beta * Bv
        f = ocp.f.copy()
        f[:nv] += beta * (g - Bv @ d[:nv])
        r = _qp(ocp, H, f)
        if r.status is not QpStatus.SOLVED:
            status = OcpStatus.SOLVED
            break
        p = r.x - d
        slope = float((ocp.H @ d + ocp.f) @ p + beta * g @ p[:nv])
        if np.linalg.norm(p) < SQP_STEP_TOL or slope >= 0:
            status = OcpStatus.SOLVED
            break
        t = 1.0
        while True:
            d_new = d + t * p
            m_new = merit(d_new)
            if m_new <= m_cur + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-10:
                d_new = None
                break
        if d_new is None:
            status = OcpStatus.SOLVED
            break
        step = d_new - d
        g_new = _grad_v(ocp, d_new)
        # damped BFGS keeps the curvature model positive definite
        s, yv = step[:nv], g_new - g
        if np.linalg.norm(s) > 1e-12:
            B0 = Bv if np.any(Bv) else np.eye(nv) * max(abs(yv @ s) / (s @ s), 1e-6)
            Bs = B0 @ s
            sBs = float(s @ Bs)
            sy = float(s @ yv)
            theta = 1.0 if sy >= 0.2 * sBs else 0.8 * sBs / (sBs - sy)
            rv = theta * yv + (1 - theta) * Bs
            Bv = B0 - np.outer(Bs, Bs) / sBs + np.outer(rv, rv) / float(s @ rv)
            Bv = 0.5 * (Bv + Bv.T)
            if not np.all(np.isfinite(Bv)) or np.linalg.eigvalsh(Bv).min() <= 0:
                Bv = np.zeros((nv, nv))
        d, g = d_new, g_new
        trace.append(m_new)
        m_cur = m_new
        if np.linalg.norm(step) < SQP_STEP_TOL:
            status = OcpStatus.SOLVED
            break
    ocp.sqp_iterations = len(trace) - 1
    return d, it, status, trace


def solve_ocp(ocp: TubeOcp, strategy) -> OcpSolution:
    strategy = Strategy(strategy)
    if not ocp.stage0_ok:
        return _infeasible(ocp)
    pe_relaxed = False
    if strategy is Strategy.ADAPTIVE_PE:
        r, pe_relaxed = _solve_pe(ocp)
    else:
        r = _solve_plain(ocp)
    if r.status is QpStatus.INFEASIBLE:
        return _infeasible(ocp, r.iterations)
    if r.status is QpStatus.MAX_ITER:
        return _package(ocp, r.x, OcpStatus.MAX_ITER, r.iterations)
    use_volume = strategy is Strategy.PROPOSED and ocp.beta > 0 and ocp.history is not None
    if not use_volume:
        return _package(ocp, r.x, OcpStatus.SOLVED, r.iterations, pe_relaxed=pe_relaxed)
    d, it, status, trace = _sqp(ocp, r.x, r.iterations)
    return _package(ocp, d, status, it, J=ocp.volume(d), merit_trace=trace)


def solve_with_backoff(build, strategy, ghost: int) -> OcpSolution:
    """Solve with ``ghost`` extra constraint stages, backing off while infeasible.

    ``build(h)`` returns the OCP with ``h`` extra constraint-only stages.
    Excitation (the volume term or the PE row) is only attempted with the
    full ``ghost`` stages.  If that fails the tracking-only problem is solved
    with ``ghost, ghost - 1, ..., 0`` extra stages.  A solution with ``h``
    extra stages, shifted by one step, certifies ``h - 1`` at the next step
    as long as the true parameters stay inside the box, so tracking-only
    steps regain the margin that excitation spent.
    """
    strategy = Strategy(strategy)
    sol = solve_ocp(build(ghost), strategy)
    if sol.status is not OcpStatus.INFEASIBLE or strategy is Strategy.PASSIVE:
        if sol.status is not OcpStatus.INFEASIBLE or ghost == 0:
            return sol
    for h in range(ghost, -1, -1):
        if h == ghost and strategy is Strategy.PASSIVE:
            continue
        sol = solve_ocp(build(h), Strategy.PASSIVE)
        if sol.status is not OcpStatus.INFEASIBLE:
            sol.fallback = strategy is not Strategy.PASSIVE
            return sol
    return sol


def check_feasibility(ocp: TubeOcp, solution, tol: float = FEAS_CHECK_TOL) -> List[int]:
    d = solution.d if isinstance(solution, OcpSolution) else np.asarray(solution, dtype=float)
    if d is None:
        return list(range(ocp.A_rows.shape[0]))
    viol = ocp.A_rows @ d - ocp.b_rows
    return [int(i) for i in np.flatnonzero(viol > tol)]
