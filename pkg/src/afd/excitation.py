"""Volume-penalizing excitation cost and its uncertainty-driven weight."""

from dataclasses import dataclass, field
from math import log
from typing import List, Tuple

import numpy as np

from .ellipsoids import ALPHA_MARGIN, _as_box, info_matrix, stacked_disturbance_ellipsoid
from .errors import DimensionMismatch, ValidationError
from .geometry import Polytope

RANK_PENALTY = 50.0
WINDOW_CAP = 40


@dataclass
class ExcitationHistory:
    """Measured states ``x_0..x_k`` and applied inputs ``u_0..u_{k-1}``."""

    past_states: List[np.ndarray] = field(default_factory=list)
    past_inputs: List[np.ndarray] = field(default_factory=list)
    window_cap: int = WINDOW_CAP

    def start(self, x) -> None:
        self.past_states = [np.asarray(x, dtype=float).reshape(-1)]
        self.past_inputs = []

    def push(self, u, x_next) -> None:
        """Record the input applied at the last state and the state it led to."""
        if len(self.past_states) != len(self.past_inputs) + 1:
            raise DimensionMismatch("states must lead inputs by exactly one")
        self.past_inputs.append(np.asarray(u, dtype=float).reshape(-1))
        self.past_states.append(np.asarray(x_next, dtype=float).reshape(-1))
        extra = len(self.past_inputs) - self.window_cap
        if extra > 0:
            del self.past_inputs[:extra]
            del self.past_states[:extra]

    def reset(self, keep_last: int = 0) -> None:
        """Forget data, keeping the last ``keep_last`` transitions."""
        n_in = len(self.past_inputs)
        drop = max(0, n_in - keep_last)
        del self.past_inputs[:drop]
        del self.past_states[:drop]

    @property
    def current_state(self) -> np.ndarray:
        return self.past_states[-1]


@dataclass(frozen=True)
class BetaSchedule:
    V_min: float = 1e-13
    V_max: float = 1.0
    beta_floor: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.V_min < self.V_max):
            raise ValidationError("schedule", "need 0 < V_min < V_max")
        if not (0.0 <= self.beta_floor <= 1.0):
            raise ValidationError("schedule.beta_floor", "must lie in [0, 1]")


def beta(V: float, sched: BetaSchedule) -> float:
    """Log-linear interpolation of ``V`` between ``V_min`` (0) and ``V_max`` (1)."""
    if V < 0:
        raise ValueError("volume must be nonnegative")
    Vc = min(max(V, sched.V_min), sched.V_max)
    b = log(Vc / sched.V_min) / log(sched.V_max / sched.V_min)
    return max(b, sched.beta_floor)


def total_cost(tracking: float, J_vol: float, beta_value: float) -> float:
    return tracking + beta_value * J_vol


def _regressor_block(x, u, n: int) -> np.ndarray:
    return np.kron(np.concatenate([x, u])[None, :], np.eye(n))


def build_stacked(hist: ExcitationHistory, v_seq, model, K) -> Tuple[np.ndarray, np.ndarray]:
    """Stack measured transitions followed by nominal predictions under ``v_seq``.

    ``model`` is any object with ``A_hat`` and ``B_hat``.  Returns ``(Z, y)``
    with ``y ~ Z theta`` and ``theta = vec([A B])``.
    """
    A, B = np.atleast_2d(model.A_hat), np.atleast_2d(model.B_hat)
    K = np.atleast_2d(K)
    n, m = B.shape
    V = np.asarray(v_seq, dtype=float).reshape(-1, m) if np.size(v_seq) else np.zeros((0, m))
    if not hist.past_states:
        raise DimensionMismatch("history has no current state")
    T_past = len(hist.past_inputs)
    N = V.shape[0]
    if T_past + N == 0:
        raise DimensionMismatch("nothing to stack")
    Z = np.empty((n * (T_past + N), n * (n + m)))
    y = np.empty(n * (T_past + N))
    for i in range(T_past):
        Z[i * n:(i + 1) * n] = _regressor_block(hist.past_states[i], hist.past_inputs[i], n)
        y[i * n:(i + 1) * n] = hist.past_states[i + 1]
    x = hist.current_state
    for l in range(N):
        u = K @ x + V[l]
        row = T_past + l
        Z[row * n:(row + 1) * n] = _regressor_block(x, u, n)
        x = A @ x + B @ u
        y[row * n:(row + 1) * n] = x
    return Z, y


def fallback_cost(base: np.ndarray, p: int, mu: float = RANK_PENALTY) -> float:
    """Finite stand-in for ``-logdet`` on a rank-deficient information matrix."""
    ev = np.linalg.eigvalsh(base)
    top = ev[-1] if ev.size else 0.0
    nz = ev[ev > 1e-10 * max(top, 1e-300)] if top > 0 else ev[:0]
    return float(-np.sum(np.log(nz)) + mu * (p - nz.size))


def _dense_volume_cost(Z, y, W: Polytope, n: int, mu: float):
    T = Z.shape[0] // n
    res = info_matrix(Z, y, stacked_disturbance_ellipsoid(W, T))
    p = Z.shape[1]
    if res.rank < p or not np.isfinite(res.logdet):
        return fallback_cost(res.info, p, mu), False
    return -res.logdet, res.well_posed


class VolumeCost:
    """``v_seq -> (J_vol, well_posed)`` for a fixed history, model and disturbance box.

    With a box disturbance the weighted Gram is ``kron(S, D)`` where ``S`` is
    the regressor Gram, so the log-determinant only needs the eigenvalues of
    the small matrix ``S``.  Near-singular ``S`` and non-box sets go through the
    dense SVD route.
    """

    # eigenvalue ratio below which the dense route decides the rank
    GRAM_COND = 1e-12

    def __init__(self, hist: ExcitationHistory, model, K, W: Polytope, mu: float = RANK_PENALTY):
        self.hist, self.W, self.mu = hist, W, mu
        self.A = np.atleast_2d(model.A_hat)
        self.B = np.atleast_2d(model.B_hat)
        self.model = model
        self.K = np.atleast_2d(K)
        self.n, self.m = self.B.shape
        self.p = self.n * (self.n + self.m)
        self.box = _as_box(W)
        self.T_past = len(hist.past_inputs)
        if self.box is None:
            return
        self.c = self.box.midpoint
        self.d = 1.0 / self.box.half_widths ** 2
        self.logdet_D = float(np.sum(np.log(self.d)))
        k = self.n + self.m
        self.Phi = np.zeros((0, k))
        self.Rr = np.zeros((0, self.n))
        if self.T_past:
            self.Phi = np.hstack([np.array(hist.past_states[:-1]), np.array(hist.past_inputs)])
            self.Rr = np.array(hist.past_states[1:]) - self.c
        self.S = self.Phi.T @ self.Phi
        self.M = self.Phi.T @ self.Rr

    def __call__(self, v_seq):
        V = np.asarray(v_seq, dtype=float).reshape(-1, self.m) if np.size(v_seq) else np.zeros((0, self.m))
        if self.box is None:
            Z, y = build_stacked(self.hist, V, self.model, self.K)
            return _dense_volume_cost(Z, y, self.W, self.n, self.mu)
        N = V.shape[0]
        Phi = np.empty((N, self.n + self.m))
        X = np.empty((N, self.n))
        x = self.hist.current_state
        for l in range(N):
            u = self.K @ x + V[l]
            Phi[l, :self.n] = x
            Phi[l, self.n:] = u
            x = self.A @ x + self.B @ u
            X[l] = x
        Rr = X - self.c
        S = self.S + Phi.T @ Phi
        M = self.M + Phi.T @ Rr
        T = self.T_past + N
        ev = np.linalg.eigvalsh(S)
        if T == 0 or ev[-1] <= 0 or ev[0] <= self.GRAM_COND * ev[-1]:
            Z, y = build_stacked(self.hist, V, self.model, self.K)
            return _dense_volume_cost(Z, y, self.W, self.n, self.mu)
        scale = 1.0 / (self.n * T)
        Bls = np.linalg.solve(S, M)
        # residual form: first-order insensitive to errors in Bls, no cancellation
        E = np.vstack([self.Rr - self.Phi @ Bls, Rr - Phi @ Bls])
        alpha = scale * float(np.sum(E * E * self.d))
        well_posed = alpha < 1.0 - ALPHA_MARGIN
        c = scale / (1.0 - alpha) if well_posed else scale
        # logdet(c * kron(S, D))
        ld = self.p * log(c) + self.n * float(np.sum(np.log(ev))) + (self.n + self.m) * self.logdet_D
        return -ld, well_posed


def volume_cost(hist: ExcitationHistory, v_seq, model, K, W: Polytope, mu: float = RANK_PENALTY):
    """``(J_vol, well_posed)`` where ``J_vol = -logdet`` of the information matrix."""
    return VolumeCost(hist, model, K, W, mu)(v_seq)
