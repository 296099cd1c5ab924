"""Dense halfspace polytopes and the LP kernel used by everything else.

The LP solver is a textbook two-phase tableau simplex.  Problems in this
package are tiny (a few hundred rows, at most a dozen columns), so a dense
tableau with numpy row operations is fast enough and easy to audit.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    DimensionTooLarge,
    EmptySet,
    NumericalFailure,
    Unbounded,
)

FEAS_TOL = 1e-9
OPT_TOL = 1e-9
PIVOT_TOL = 1e-11
MAX_ITER = 10_000
VERTEX_DIM_CAP = 12

# Dantzig pricing until this many consecutive degenerate pivots, then Bland.
_DEGENERATE_SWITCH = 50


@dataclass(frozen=True, eq=False)
class Polytope:
    """Halfspace set ``{p : G p <= g}``."""

    G: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        g = np.asarray(self.g, dtype=float).reshape(-1)
        if G.shape[0] != g.shape[0]:
            raise DimensionMismatch(f"G has {G.shape[0]} rows, g has {g.shape[0]}")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "g", g)

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    @property
    def n_rows(self) -> int:
        return self.G.shape[0]

    @classmethod
    def from_box(cls, lo, hi) -> "Polytope":
        return HyperRect(lo, hi).to_polytope()

    @classmethod
    def whole_space(cls, dim: int) -> "Polytope":
        return cls(np.zeros((0, dim)), np.zeros(0))


@dataclass(frozen=True, eq=False)
class HyperRect:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise DimensionMismatch("lo and hi differ in length")
        if np.any(lo > hi):
            raise ValueError("HyperRect requires lo <= hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half_widths(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    def volume(self) -> float:
        return float(np.prod(self.widths))

    def to_polytope(self) -> Polytope:
        eye = np.eye(self.dim)
        return Polytope(np.vstack([eye, -eye]), np.concatenate([self.hi, -self.lo]))

    def contains(self, point, tol: float = FEAS_TOL) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= self.lo - tol) and np.all(p <= self.hi + tol))

    def __eq__(self, other):
        if not isinstance(other, HyperRect):
            return NotImplemented
        return np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)


class LpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


@dataclass
class LpSolution:
    status: LpStatus
    point: Optional[np.ndarray]
    objective: float
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


class _Simplex:
    """Two-phase primal simplex on ``G p <= g`` with ``p`` free.

    Works on a condensed (dictionary) tableau: one row per basic variable,
    one column per nonbasic variable, so a pivot costs ``O(rows * dim)``.
    Variables are labelled ``0..d-1`` for ``p`` (free, never leave the basis
    once they enter), ``d..d+R-1`` for the row slacks and ``d+R`` for the
    phase-1 artificial.  Dictionary rows read ``x_B = rhs - D[:, :-1] @ x_N``;
    the last row holds the objective in the same convention.

    Once phase 1 has found a feasible basis, :meth:`minimize` can be called
    repeatedly with different costs, warm-starting from the last basis.
    """

    def __init__(self, G, g, max_iter=MAX_ITER):
        G = np.atleast_2d(np.asarray(G, dtype=float))
        g = np.asarray(g, dtype=float).reshape(-1)
        d = G.shape[1]
        self.dim = d
        self.max_iter = max_iter
        self.iterations = 0
        self.infeasible = False

        norms = np.linalg.norm(G, axis=1)
        zero = norms <= 1e-14
        if np.any(g[zero] < -FEAS_TOL):
            self.infeasible = True
            return
        keep = ~zero
        G = G[keep] / norms[keep, None]
        g = g[keep] / norms[keep]
        R = G.shape[0]
        self.n_rows = R

        # columns: p_0..p_{d-1}, artificial t; slack rows s = g - G p + t
        D = np.zeros((R + 1, d + 2))
        D[:R, :d] = G
        D[:R, d] = -1.0
        D[:R, -1] = g
        D[R, d] = -1.0  # phase-1 objective z = t
        self.D = D
        self.basic = np.arange(d, d + R)
        self.nonbasic = np.concatenate([np.arange(d), [d + R]])
        art = d + R

        if R and g.min() < -FEAS_TOL:
            self._pivot(int(np.argmin(g)), d)
            self._run()
            if self.D[-1, -1] > FEAS_TOL:
                self.infeasible = True
                return
        # drive the artificial out of the basis if it is still there at zero
        rows = np.flatnonzero(self.basic == art)
        if rows.size:
            r = int(rows[0])
            cols = np.flatnonzero(np.abs(self.D[r, :-1]) > 1e-9)
            cols = cols[self.nonbasic[cols] != art]
            if cols.size:
                self._pivot(r, int(cols[0]))
            else:
                self.D = np.delete(self.D, r, axis=0)
                self.basic = np.delete(self.basic, r)
        col = int(np.flatnonzero(self.nonbasic == art)[0])
        self.D = np.delete(self.D, col, axis=1)
        self.nonbasic = np.delete(self.nonbasic, col)

    def _pivot(self, r, j):
        D = self.D
        a = D[r, j]
        row = D[r] / a
        row[j] = 1.0 / a
        col = D[:, j].copy()
        col[r] = 0.0
        D -= np.outer(col, row)
        D[:, j] = -col / a
        D[r] = row
        self.basic[r], self.nonbasic[j] = self.nonbasic[j], self.basic[r]

    def _run(self):
        """Pivot until optimal; returns False if the objective is unbounded."""
        d = self.dim
        degenerate = 0
        while True:
            if self.iterations >= self.max_iter:
                raise NumericalFailure(f"simplex exceeded {self.max_iter} pivots")
            D = self.D
            obj = D[-1, :-1]
            gain = obj.copy()
            free = self.nonbasic < d
            gain[free] = np.abs(gain[free])
            if degenerate < _DEGENERATE_SWITCH:
                j = int(gain.argmax())
                if gain[j] <= OPT_TOL:
                    return True
            else:
                cand = np.flatnonzero(gain > OPT_TOL)
                if cand.size == 0:
                    return True
                j = int(cand[self.nonbasic[cand].argmin()])
            colv = D[:-1, j] if obj[j] > 0 else -D[:-1, j]
            lim = (colv > PIVOT_TOL) & (self.basic >= d)
            if not lim.any():
                return False
            ratios = np.full(colv.shape[0], np.inf)
            ratios[lim] = D[:-1, -1][lim] / colv[lim]
            r = int(ratios.argmin())
            best = ratios[r]
            if degenerate >= _DEGENERATE_SWITCH:
                ties = np.flatnonzero(ratios <= best + 1e-12 * max(1.0, abs(best)))
                r = int(ties[self.basic[ties].argmin()])
            degenerate = degenerate + 1 if best <= FEAS_TOL else 0
            self._pivot(r, j)
            self.iterations += 1

    def minimize(self, cost) -> LpSolution:
        if self.infeasible:
            return LpSolution(LpStatus.INFEASIBLE, None, np.nan, self.iterations)
        d = self.dim
        cost = np.asarray(cost, dtype=float)
        D = self.D
        obj = np.zeros(D.shape[1])
        rows = np.flatnonzero(self.basic < d)
        if rows.size:
            obj += cost[self.basic[rows]] @ D[rows]
        cols = np.flatnonzero(self.nonbasic < d)
        obj[cols] -= cost[self.nonbasic[cols]]
        D[-1] = obj
        if not self._run():
            return LpSolution(LpStatus.UNBOUNDED, None, -np.inf, self.iterations)
        p = np.zeros(d)
        rows = np.flatnonzero(self.basic < d)
        p[self.basic[rows]] = self.D[rows, -1]
        return LpSolution(LpStatus.OPTIMAL, p, float(cost @ p), self.iterations)


def solve_lp(cost, P: Polytope, extra_eq=None, max_iter: int = MAX_ITER) -> LpSolution:
    """Minimize ``cost @ p`` over ``P`` (optionally with equality rows).

    ``extra_eq`` is a pair ``(E, e)`` of equality rows ``E p = e``.
    """
    cost = np.asarray(cost, dtype=float).reshape(-1)
    if cost.shape[0] != P.dim:
        raise DimensionMismatch(f"cost has length {cost.shape[0]}, polytope dim {P.dim}")
    G, g = P.G, P.g
    if extra_eq is not None:
        E, e = extra_eq
        E = np.atleast_2d(np.asarray(E, dtype=float))
        e = np.asarray(e, dtype=float).reshape(-1)
        if E.size:
            if E.shape[1] != P.dim:
                raise DimensionMismatch("equality rows do not match polytope dimension")
            G = np.vstack([G, E, -E])
            g = np.concatenate([g, e, -e])
    return _Simplex(G, g, max_iter=max_iter).minimize(cost)


def intersect(P: Polytope, rows_G, rows_g) -> Polytope:
    rows_G = np.asarray(rows_G, dtype=float)
    rows_g = np.asarray(rows_g, dtype=float).reshape(-1)
    if rows_G.size == 0:
        return P
    rows_G = np.atleast_2d(rows_G)
    if rows_G.shape[1] != P.dim:
        raise DimensionMismatch(f"rows have {rows_G.shape[1]} columns, polytope dim {P.dim}")
    return Polytope(np.vstack([P.G, rows_G]), np.concatenate([P.g, rows_g]))


def is_empty(P: Polytope, max_iter: int = MAX_ITER) -> bool:
    return _Simplex(P.G, P.g, max_iter=max_iter).infeasible


def contains(P: Polytope, point, tol: float = FEAS_TOL) -> bool:
    p = np.asarray(point, dtype=float).reshape(-1)
    if p.shape[0] != P.dim:
        raise DimensionMismatch(f"point has length {p.shape[0]}, polytope dim {P.dim}")
    return bool(np.all(P.G @ p <= P.g + tol))


def support(P: Polytope, direction) -> float:
    d = np.asarray(direction, dtype=float).reshape(-1)
    sol = solve_lp(-d, P)
    if sol.status is LpStatus.INFEASIBLE:
        raise EmptySet("support of an empty polytope")
    if sol.status is LpStatus.UNBOUNDED:
        raise Unbounded("polytope unbounded in the given direction")
    return -sol.objective


def _extreme_points(P: Polytope, max_iter=MAX_ITER):
    """Minimizers of +-e_i over P, sharing a single phase-1 solve."""
    lp = _Simplex(P.G, P.g, max_iter=max_iter)
    if lp.infeasible:
        raise EmptySet("polytope is empty")
    lows, highs = [], []
    eye = np.eye(P.dim)
    for i in range(P.dim):
        for sgn, out in ((1.0, lows), (-1.0, highs)):
            sol = lp.minimize(sgn * eye[i])
            if sol.status is LpStatus.UNBOUNDED:
                raise Unbounded(f"polytope unbounded along coordinate {i}")
            out.append(sol.point)
    return lows, highs


def bounding_box(P: Polytope, max_iter: int = MAX_ITER) -> HyperRect:
    lows, highs = _extreme_points(P, max_iter)
    lo = np.array([p[i] for i, p in enumerate(lows)])
    hi = np.array([p[i] for i, p in enumerate(highs)])
    return HyperRect(lo, np.maximum(hi, lo))


def chebyshev_center(P: Polytope):
    """Center and radius of the largest ball inscribed in ``P``.

    The maximal radius comes from one LP.  When the set of maximal centers is
    not a single point (any non-cubic box, for instance) the returned center
    is the midpoint of that set's bounding box if it is itself a maximal
    center, otherwise the mean of the extreme centers.  Boxes therefore get
    their exact midpoint.
    """
    d = P.dim
    norms = np.linalg.norm(P.G, axis=1)
    G_aug = np.vstack([np.hstack([P.G, norms[:, None]]), np.eye(1, d + 1, d) * -1.0])
    g_aug = np.concatenate([P.g, [0.0]])
    cost = np.zeros(d + 1)
    cost[-1] = -1.0
    sol = solve_lp(cost, Polytope(G_aug, g_aug))
    if sol.status is LpStatus.INFEASIBLE:
        raise EmptySet("polytope is empty")
    if sol.status is LpStatus.UNBOUNDED:
        raise Unbounded("polytope contains arbitrarily large balls")
    radius = float(sol.point[-1])
    centers = Polytope(P.G, P.g - norms * radius)
    try:
        lows, highs = _extreme_points(centers)
    except EmptySet:
        # numerical slack at the optimum; the LP point is still valid
        return sol.point[:d], radius
    lo = np.array([p[i] for i, p in enumerate(lows)])
    hi = np.array([p[i] for i, p in enumerate(highs)])
    mid = 0.5 * (lo + hi)
    if contains(centers, mid, tol=1e-9):
        return mid, radius
    return np.mean(np.vstack(lows + highs), axis=0), radius


def box_vertices(R: HyperRect, cap: int = VERTEX_DIM_CAP):
    """All corners of ``R``; bit ``i`` of the vertex index selects ``hi[i]``."""
    if R.dim > cap:
        raise DimensionTooLarge(f"{R.dim}-dimensional box exceeds vertex cap {cap}")
    idx = np.arange(2 ** R.dim)
    bits = (idx[:, None] >> np.arange(R.dim)[None, :]) & 1
    return list(np.where(bits == 1, R.hi, R.lo))


def prune(P: Polytope, box: Optional[HyperRect] = None, tol: float = FEAS_TOL) -> Polytope:
    """Remove redundant rows without changing the set.

    Rows whose maximum over ``box`` (an outer bound of ``P``) falls strictly
    below the offset are dropped without an LP.  Every other row is tested by
    maximizing it over the remaining rows with itself relaxed by one.
    """
    G, g = P.G, P.g
    if G.shape[0] == 0:
        return P
    _, first = np.unique(np.round(np.hstack([G, g[:, None]]), 14), axis=0, return_index=True)
    keep = np.zeros(G.shape[0], dtype=bool)
    keep[np.sort(first)] = True
    if box is not None:
        box_max = np.maximum(G * box.hi, G * box.lo).sum(axis=1)
        keep &= ~(box_max < g - tol)
    for i in np.flatnonzero(keep):
        rows = np.flatnonzero(keep)
        relaxed = g[rows].copy()
        relaxed[rows == i] += 1.0
        sol = solve_lp(-G[i], Polytope(G[rows], relaxed))
        if sol.status is LpStatus.OPTIMAL and -sol.objective <= g[i] + tol:
            keep[i] = False
    if box is not None:
        # box rows keep the result bounded; pad them so LP round-off never cuts P
        pad = 1e-8 * np.maximum(1.0, np.abs(np.concatenate([box.hi, box.lo])))
        bp = box.to_polytope()
        return Polytope(np.vstack([G[keep], bp.G]), np.concatenate([g[keep], bp.g + pad]))
    return Polytope(G[keep], g[keep])


def sample_hit_and_run(P: Polytope, start, n: int, rng, burn: int = 50):
    """Hit-and-run samples from a bounded polytope, starting at an interior point."""
    x = np.asarray(start, dtype=float).copy()
    out = np.empty((n, P.dim))
    for k in range(n + burn):
        d = rng.standard_normal(P.dim)
        d /= np.linalg.norm(d)
        Gd = P.G @ d
        slack = P.g - P.G @ x
        with np.errstate(divide="ignore", invalid="ignore"):
            t = slack / Gd
        t_hi = np.min(t[Gd > 1e-14], initial=np.inf)
        t_lo = np.max(t[Gd < -1e-14], initial=-np.inf)
        x = x + rng.uniform(t_lo, t_hi) * d
        if k >= burn:
            out[k - burn] = x
    return out
