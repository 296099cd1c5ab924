"""Dense dual active-set QP solver (Goldfarb and Idnani).

Solves ``min 0.5 x^T H x + f^T x`` subject to ``A x <= b`` for strictly
convex ``H``.  The dual method starts from the unconstrained minimizer and
adds violated constraints one at a time, so no feasible starting point is
needed and infeasibility is detected directly.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import qr_delete, qr_insert, solve_triangular
from scipy.linalg.lapack import dtrtrs

from .errors import NotPositiveDefinite

QP_TOL = 1e-10
MAX_ITER = 2000


class QpStatus(str, Enum):
    SOLVED = "Solved"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"


@dataclass
class QpResult:
    status: QpStatus
    x: np.ndarray
    objective: float
    active: list
    multipliers: np.ndarray
    iterations: int


def solve_qp(H, f, A=None, b=None, tol: float = QP_TOL, max_iter: int = MAX_ITER) -> QpResult:
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float).reshape(-1)
    nv = f.size
    if A is None or np.size(A) == 0:
        A = np.zeros((0, nv))
        b = np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    try:
        L = np.linalg.cholesky(0.5 * (H + H.T))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("QP Hessian is not positive definite") from exc
    Linv = solve_triangular(L, np.eye(nv), lower=True)
    # constraints become n_j^T x >= c_j with n_j = -A_j, c_j = -b_j
    Nall = -A
    call = -b
    # columns of Linv @ n_j, precomputed once
    LN = Linv @ Nall.T
    row_scale = np.maximum(1.0, np.linalg.norm(A, axis=1))

    x = -Linv.T @ (Linv @ f)
    active: list = []
    u = np.zeros(0)
    it = 0
    # full QR of the active columns of LN, updated one column at a time
    Q = np.eye(nv)
    R = np.zeros((nv, 0))
    LinvT = np.ascontiguousarray(Linv.T)

    def objective(xv):
        return float(0.5 * xv @ H @ xv + f @ xv)

    while True:
        s = Nall @ x - call
        viol = s / row_scale
        if active:
            viol[active] = np.inf
        if viol.size == 0 or viol.min() >= -tol:
            return QpResult(QpStatus.SOLVED, x, objective(x), list(active), u, it)
        p = int(np.argmin(viol))
        c = LN[:, p]
        cc = float(c @ c)
        u_plus = np.append(u, 0.0)
        while True:
            it += 1
            if it > max_iter:
                return QpResult(QpStatus.MAX_ITER, x, objective(x), list(active), u, it)
            q = len(active)
            qc = Q.T @ c
            if q:
                r, info = dtrtrs(R[:q, :q], qc[:q])
            else:
                r = np.zeros(0)
            zt = Q[:, q:] @ qc[q:]
            z = LinvT @ zt
            # partial step: largest dual move keeping multipliers nonnegative
            t1, k_drop = np.inf, -1
            pos = r > tol
            if pos.any():
                ratios = np.full(q, np.inf)
                ratios[pos] = u_plus[:q][pos] / r[pos]
                k_drop = int(np.argmin(ratios))
                t1 = ratios[k_drop]
            zn = float(zt @ zt)
            sp = float(Nall[p] @ x - call[p])
            t2 = np.inf if zn <= tol * tol * max(1.0, cc) else -sp / zn
            t = min(t1, t2)
            if not np.isfinite(t):
                return QpResult(QpStatus.INFEASIBLE, x, objective(x), list(active), u, it)
            u_plus[:q] -= t * r
            u_plus[q] += t
            if np.isfinite(t2):
                x = x + t * z
                if t2 <= t1:
                    Q, R = qr_insert(Q, R, c, q, "col", check_finite=False)
                    active.append(p)
                    u = u_plus
                    break
            Q, R = qr_delete(Q, R, k_drop, 1, "col", check_finite=False)
            u_plus = np.delete(u_plus, k_drop)
            del active[k_drop]
