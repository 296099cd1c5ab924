"""Ellipsoidal outer bounds and the log-det volume surrogate."""

from dataclasses import dataclass
from math import gamma, pi

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, NotSymmetric, SingularShape
from .geometry import HyperRect, Polytope

SIGMA_TOL = 1e-10
ALPHA_MARGIN = 1e-6
SYM_TOL = 1e-10
KHACHIYAN_EPS = 1e-6
KHACHIYAN_MAX_ITER = 100_000


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    """``{p : (p - center)^T shape_inv (p - center) <= 1}``."""

    center: np.ndarray
    shape_inv: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(-1)
        S = np.atleast_2d(np.asarray(self.shape_inv, dtype=float))
        if S.shape != (c.size, c.size):
            raise DimensionMismatch(f"shape_inv {S.shape} does not match center of length {c.size}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "shape_inv", S)

    @property
    def dim(self) -> int:
        return self.center.size

    def quad_form(self, points) -> np.ndarray:
        """``(p - c)^T shape_inv (p - c)`` for each row of ``points``."""
        X = np.atleast_2d(points) - self.center
        return np.einsum("ij,jk,ik->i", X, self.shape_inv, X)


@dataclass
class InfoMatrixResult:
    info: np.ndarray
    alpha: float
    logdet: float
    well_posed: bool
    rank: int
    center: np.ndarray


def mvee(points, eps: float = KHACHIYAN_EPS, max_iter: int = KHACHIYAN_MAX_ITER) -> Ellipsoid:
    """Minimum-volume enclosing ellipsoid by Khachiyan's barycentric ascent."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    n_pts, d = P.shape
    Q = np.vstack([P.T, np.ones(n_pts)])
    if np.linalg.matrix_rank(Q) < d + 1:
        raise DegenerateInput("points lie in a proper affine subspace")
    u = np.full(n_pts, 1.0 / n_pts)
    for _ in range(max_iter):
        X = (Q * u) @ Q.T
        M = np.einsum("ij,ji->i", Q.T, np.linalg.solve(X, Q))
        j = int(np.argmax(M))
        step = (M[j] - d - 1.0) / ((d + 1.0) * (M[j] - 1.0))
        if step <= eps / (d + 1.0):
            break
        u *= 1.0 - step
        u[j] += step
    c = P.T @ u
    cov = (P.T * u) @ P - np.outer(c, c)
    A = np.linalg.inv(cov) / d
    # scale so every input point is inside despite the eps stopping slack
    scale = np.max(np.einsum("ij,jk,ik->i", P - c, A, P - c))
    return Ellipsoid(c, A / max(scale, 1.0))


def box_mvee(R: HyperRect) -> Ellipsoid:
    r = R.half_widths
    if np.any(r <= 0):
        raise DegenerateInput("box has a zero-width side")
    M = R.dim
    return Ellipsoid(R.midpoint, np.diag(1.0 / (M * r ** 2)))


def _as_box(W: Polytope):
    """The box described by ``W`` if its rows are exactly +-unit vectors."""
    G = W.G
    d = W.dim
    lo = np.full(d, -np.inf)
    hi = np.full(d, np.inf)
    for row, off in zip(G, W.g):
        nz = np.flatnonzero(row)
        if nz.size != 1:
            return None
        i = nz[0]
        if row[i] > 0:
            hi[i] = min(hi[i], off / row[i])
        else:
            lo[i] = max(lo[i], off / row[i])
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) or np.any(lo > hi):
        return None
    return HyperRect(lo, hi)


def polytope_vertices_2d(W: Polytope):
    """Vertices of a bounded 2-D polytope by pairwise row intersection."""
    G, g = W.G, W.g
    pts = []
    for i in range(len(g)):
        for j in range(i + 1, len(g)):
            M = G[[i, j]]
            if abs(np.linalg.det(M)) < 1e-12:
                continue
            p = np.linalg.solve(M, g[[i, j]])
            if np.all(G @ p <= g + 1e-9):
                pts.append(p)
    if not pts:
        raise DegenerateInput("no vertices found")
    return np.unique(np.round(np.array(pts), 12), axis=0)


def stacked_disturbance_ellipsoid(W: Polytope, T: int, vertices=None) -> Ellipsoid:
    """Ellipsoid containing the ``T``-fold product ``W x ... x W``.

    Boxes give the exact product box ellipsoid.  Other shapes take the
    Khachiyan ellipsoid of one step (``vertices`` must be supplied above two
    dimensions) and bound the sum of ``T`` unit quadratic forms by ``T``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    box = _as_box(W)
    if box is not None:
        return box_mvee(HyperRect(np.tile(box.lo, T), np.tile(box.hi, T)))
    if vertices is None:
        if W.dim != 2:
            raise DegenerateInput("vertices of a non-box disturbance set must be supplied")
        vertices = polytope_vertices_2d(W)
    E = mvee(vertices)
    return Ellipsoid(np.tile(E.center, T), np.kron(np.eye(T), E.shape_inv) / T)


def log_det_psd(M) -> float:
    """Log-determinant of a symmetric PSD matrix; ``-inf`` when singular."""
    M = np.asarray(M, dtype=float)
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if M.shape[0] != M.shape[1] or np.max(np.abs(M - M.T), initial=0.0) > SYM_TOL * scale:
        raise NotSymmetric("matrix is not symmetric")
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return -np.inf
    diag = np.diag(L)
    if np.any(diag <= 0):
        return -np.inf
    return float(2.0 * np.sum(np.log(diag)))


def ellipsoid_volume(E: Ellipsoid) -> float:
    d = E.dim
    ld = log_det_psd(E.shape_inv)
    if not np.isfinite(ld):
        raise SingularShape("shape matrix is singular")
    unit = pi ** (d / 2) / gamma(d / 2 + 1)
    return float(unit * np.exp(-0.5 * ld))


def info_matrix(Z, y, W_stack: Ellipsoid, alpha_margin: float = ALPHA_MARGIN) -> InfoMatrixResult:
    """Shape of the parameter ellipsoid implied by ``y = Z theta + w``, ``w`` in ``W_stack``.

    ``info = Z^T Cw^-1 Z / (1 - alpha)`` with the offset correction
    ``alpha = r^T (Cw^-1 - Zt^T Cw^-1 Zt) r``, ``r = y - c_w`` and ``Zt`` the
    orthogonal projector onto the range of ``Z``.  When ``alpha`` comes within
    ``alpha_margin`` of one the ``1/(1 - alpha)`` factor is dropped and the
    result is flagged as not well posed.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if Z.shape[0] != W_stack.dim or y.size != W_stack.dim:
        raise DimensionMismatch(
            f"Z has {Z.shape[0]} rows and y length {y.size}; disturbance ellipsoid dim {W_stack.dim}"
        )
    p = Z.shape[1]
    Cw_inv = W_stack.shape_inv
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > SIGMA_TOL * smax)) if smax > 0 else 0
    Ur = U[:, :rank]
    r = y - W_stack.center
    proj = Ur @ (Ur.T @ r)
    e = r - proj
    # same as r'Cr - p'Cp, written without the cancellation
    alpha = float(e @ Cw_inv @ e + 2.0 * (e @ Cw_inv @ proj))
    center = Vt[:rank].T @ ((Ur.T @ r) / s[:rank]) if rank else np.zeros(p)

    base = Z.T @ Cw_inv @ Z
    base = 0.5 * (base + base.T)
    well_posed = rank == p and alpha < 1.0 - alpha_margin
    info = base / (1.0 - alpha) if well_posed else base
    logdet = log_det_psd(info) if rank == p else -np.inf
    return InfoMatrixResult(info=info, alpha=alpha, logdet=logdet, well_posed=well_posed,
                            rank=rank, center=center)

