"""Set-membership identification, fault detection and model adaptation.

Parameters are ``theta = vec([A B])`` with column-major ``vec``, so for
``n = 2, m = 1`` the ordering is ``(A11, A21, A12, A22, B1, B2)``.
"""

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .errors import DimensionMismatch, EmptySet
from .geometry import (
    HyperRect,
    Polytope,
    bounding_box,
    chebyshev_center,
    contains,
    intersect,
    is_empty,
    prune,
)

RANK_TOL = 1e-10
MEMBER_TOL = 1e-9


def vec_ab(A, B) -> np.ndarray:
    return np.hstack([np.atleast_2d(A), np.atleast_2d(B)]).reshape(-1, order="F")


def unvec_ab(theta, n: int, m: int) -> Tuple[np.ndarray, np.ndarray]:
    AB = np.asarray(theta, dtype=float).reshape((n, n + m), order="F")
    return AB[:, :n].copy(), AB[:, n:].copy()


def box_from_matrices(A_lo, A_hi, B_lo, B_hi) -> HyperRect:
    return HyperRect(vec_ab(A_lo, B_lo), vec_ab(A_hi, B_hi))


class Cause(str, Enum):
    NOMINAL_EXCLUDED = "NominalExcluded"
    EMPTY_SET = "EmptySet"


class Source(str, Enum):
    NOMINAL = "Nominal"
    LEAST_SQUARES = "LeastSquares"
    GEOMETRIC_CENTER = "GeometricCenter"


@dataclass(frozen=True)
class DetectionEvent:
    step: int
    cause: Cause
    volume: float

    def to_dict(self):
        return {"step": self.step, "cause": self.cause.value, "volume": self.volume}


@dataclass(frozen=True, eq=False)
class ModelEstimate:
    A_hat: np.ndarray
    B_hat: np.ndarray
    source: Source = Source.NOMINAL

    @property
    def theta(self) -> np.ndarray:
        return vec_ab(self.A_hat, self.B_hat)


@dataclass(frozen=True, eq=False)
class SmiState:
    n: int
    m: int
    param_set: Polytope
    param_box: HyperRect
    H_xu: np.ndarray
    H_xplus: np.ndarray
    fault_detected: bool = False
    last_reset_step: int = 0
    detection_log: Tuple[DetectionEvent, ...] = ()
    step: int = 0
    nominal_inside: bool = True
    n_ls: int = 20
    prune_period: int = 5
    # AB0 itself was contradicted by a datum (unmodeled fault)
    inconsistent: bool = False
    reset_at_last_update: bool = False

    @classmethod
    def initial(cls, AB0: Polytope, n: int, m: int, theta_nom=None, n_ls: int = 20,
                prune_period: int = 5) -> "SmiState":
        if AB0.dim != n * (n + m):
            raise DimensionMismatch(f"parameter set has dim {AB0.dim}, expected {n * (n + m)}")
        inside = True if theta_nom is None else contains(AB0, theta_nom, MEMBER_TOL)
        return cls(n=n, m=m, param_set=AB0, param_box=bounding_box(AB0),
                   H_xu=np.zeros((n + m, 0)), H_xplus=np.zeros((n, 0)),
                   nominal_inside=inside, n_ls=n_ls, prune_period=prune_period)


def delta_rows(x_prev, u_prev, x_next, W: Polytope):
    """Halfspaces in theta consistent with one measured transition."""
    x_prev = np.asarray(x_prev, dtype=float).reshape(-1)
    u_prev = np.asarray(u_prev, dtype=float).reshape(-1)
    x_next = np.asarray(x_next, dtype=float).reshape(-1)
    n = x_prev.size
    if x_next.size != n or W.dim != n:
        raise DimensionMismatch(f"state length {n}, successor {x_next.size}, disturbance dim {W.dim}")
    z = np.concatenate([x_prev, u_prev])
    rows_G = -np.kron(z[None, :], W.G)
    rows_g = W.g - W.G @ x_next
    return rows_G, rows_g


def smi_update(S: SmiState, x_prev, u_prev, x_next, W: Polytope, theta_nom, AB0: Polytope,
               step: Optional[int] = None) -> SmiState:
    step = S.step + 1 if step is None else step
    rows_G, rows_g = delta_rows(x_prev, u_prev, x_next, W)
    P = intersect(S.param_set, rows_G, rows_g)
    col_xu = np.concatenate([np.ravel(x_prev), np.ravel(u_prev)])[:, None]
    col_x = np.ravel(x_next)[:, None]
    H_xu = np.hstack([S.H_xu, col_xu])[:, -S.n_ls:]
    H_xplus = np.hstack([S.H_xplus, col_x])[:, -S.n_ls:]

    fault = S.fault_detected
    log = list(S.detection_log)
    last_reset = S.last_reset_step
    inconsistent = S.inconsistent
    cause = None
    reset = False

    if is_empty(P):
        cause = Cause.EMPTY_SET
        reset = True
        fault = True
        last_reset = step
        P = intersect(AB0, rows_G, rows_g)
        if is_empty(P):
            # not even AB0 explains the datum; keep the prior set and flag it
            inconsistent = True
            P = AB0
        H_xu, H_xplus = col_xu, col_x
        inside = contains(P, theta_nom, MEMBER_TOL)
    else:
        inside = contains(P, theta_nom, MEMBER_TOL)
        if S.nominal_inside and not inside:
            cause = Cause.NOMINAL_EXCLUDED
            fault = True
            H_xu, H_xplus = col_xu, col_x

    box = bounding_box(P)
    if not reset:
        # P shrank, so clipping to the old box only removes LP round-off
        lo = np.minimum(np.maximum(box.lo, S.param_box.lo), S.param_box.hi)
        box = HyperRect(lo, np.maximum(np.minimum(box.hi, S.param_box.hi), lo))
    if S.prune_period > 0 and step % S.prune_period == 0 and P.n_rows > AB0.n_rows:
        P = prune(P, box)
    if cause is not None:
        log.append(DetectionEvent(step, cause, box.volume()))
    return replace(S, param_set=P, param_box=box, H_xu=H_xu, H_xplus=H_xplus,
                   fault_detected=fault, last_reset_step=last_reset,
                   detection_log=tuple(log), step=step, nominal_inside=inside,
                   inconsistent=inconsistent, reset_at_last_update=reset)


def lse(H_xu, H_xplus):
    """Least-squares ``(A_est, B_est)``, or ``None`` when ``H_xu`` lacks full row rank."""
    H_xu = np.atleast_2d(np.asarray(H_xu, dtype=float))
    H_xplus = np.atleast_2d(np.asarray(H_xplus, dtype=float))
    if H_xu.shape[1] != H_xplus.shape[1]:
        raise DimensionMismatch("data matrices have different column counts")
    n, nm = H_xplus.shape[0], H_xu.shape[0]
    if H_xu.shape[1] < nm:
        return None
    U, s, Vt = np.linalg.svd(H_xu, full_matrices=False)
    if s[0] <= 0 or np.sum(s > RANK_TOL * s[0]) < nm:
        return None
    AB = H_xplus @ Vt.T @ np.diag(1.0 / s) @ U.T
    return AB[:, :n], AB[:, n:]


def current_model(S: SmiState, nominal: ModelEstimate) -> ModelEstimate:
    if not S.fault_detected:
        return ModelEstimate(nominal.A_hat, nominal.B_hat, Source.NOMINAL)
    est = lse(S.H_xu, S.H_xplus)
    if est is not None:
        return ModelEstimate(est[0], est[1], Source.LEAST_SQUARES)
    try:
        center, _ = chebyshev_center(S.param_set)
    except EmptySet:  # pragma: no cover - updates never leave an empty set
        raise AssertionError("parameter set is empty after an update")
    A, B = unvec_ab(center, S.n, S.m)
    return ModelEstimate(A, B, Source.GEOMETRIC_CENTER)


def param_volume(S: SmiState) -> float:
    return S.param_box.volume()


def check_shutdown(M: ModelEstimate, AB0: Polytope) -> bool:
    return not contains(AB0, M.theta, MEMBER_TOL)
