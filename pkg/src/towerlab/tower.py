"""Discrete suspension towers over induced maps.

A tower stacks each first-return cell Y_j into a column of height r(j); the
tower map climbs columns and drops to the base through the return map.  The
truncated variant caps column heights at a level N, splitting the tower into
a short-column part and a tall-column part, with exact identities tying the
truncated mean height to the return-time tail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from towerlab.maps import InducedMap

__all__ = [
    "Tower",
    "TruncatedTower",
    "build_tower",
    "truncate",
    "visit_measure",
    "separation_time",
    "d_theta",
]


class Tower:
    """Tower over an induced map with the symbolic metric parameter theta.

    Cell (j, l), 0 <= l < r(j), carries invariant measure mu_Y(Y_j)/rbar,
    where rbar is the mean return time over represented cells.  Tail mass
    beyond the branch cutoff is excluded from the normalisation and reported
    via ``tail_mass_estimate``.
    """

    def __init__(self, ind: InducedMap, theta: float | None = None) -> None:
        if theta is None:
            theta = ind.model.expansion ** (-ind.model.eta)
        if not (0.0 < theta < 1.0):
            raise ValueError("theta must lie in (0, 1)")
        self.ind = ind
        self.theta = float(theta)
        self.heights = ind.r.copy()
        self.rbar = float(np.sum(ind.r * ind.muY))
        self.column_mass = ind.muY / self.rbar  # per level of each column
        self.n_cells = int(self.heights.sum())

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.heights * self.column_mass))

    @property
    def tail_mass_estimate(self) -> float:
        """Estimated tower mass of the unrepresented columns."""
        t = self.ind.mean_return_tail
        return t / (self.rbar + t)

    def project(self, j, level, y) -> np.ndarray:
        """Ambient position of tower points: T^level applied to base coords."""
        y = np.asarray(y, dtype=float)
        level = np.broadcast_to(np.asarray(level, dtype=int), y.shape)
        out = y.copy()
        steps = level.copy()
        while steps.max(initial=0) > 0:
            act = steps > 0
            out[act] = self.ind.model.apply(out[act])
            steps[act] -= 1
        return out

    def column_positions(self, j: int, y_nodes: np.ndarray) -> np.ndarray:
        """Ambient positions T^l(y_nodes) for all levels l of column j,
        shape (r(j), len(y_nodes))."""
        out = np.empty((int(self.heights[j]), len(y_nodes)))
        cur = np.asarray(y_nodes, dtype=float).copy()
        for ell in range(int(self.heights[j])):
            out[ell] = cur
            cur = self.ind.model.apply(cur)
        return out

    def step(self, j, level, y):
        """One application of the tower map to (column, level, base coord)."""
        j = np.asarray(j, dtype=int).copy()
        level = np.asarray(level, dtype=int) + 1
        y = np.asarray(y, dtype=float).copy()
        drop = level >= self.heights[j]
        if np.any(drop):
            ynew = self.ind.F(j[drop], y[drop])
            jnew = self.ind.cell_of(ynew)
            y[drop] = ynew
            j[drop] = jnew
            level = np.where(drop, 0, level)
        return j, level, y

    def to_csv(self, path) -> None:
        ind = self.ind
        with open(path, "w") as fh:
            fh.write("j,level,measure,r,r_trunc,lo_proj,hi_proj\n")
            for j in range(ind.J):
                ends = np.array([ind.lo[j], ind.hi[j]])
                for ell in range(int(self.heights[j])):
                    fh.write(f"{j},{ell},{self.column_mass[j]:.17g},"
                             f"{ind.r[j]},{self.heights[j]},"
                             f"{ends[0]:.17g},{ends[1]:.17g}\n")
                    ends = ind.model.apply(ends)


class TruncatedTower(Tower):
    """Tower with column heights capped at N; the return map is unchanged."""

    def __init__(self, parent: Tower, N: int) -> None:
        if N < 1:
            raise ValueError("truncation level must be >= 1")
        ind = parent.ind
        self.parent = parent
        self.N = int(N)
        self.ind = ind
        self.theta = parent.theta
        self.heights = np.minimum(ind.r, N)
        self.rbar = float(np.sum(self.heights * ind.muY))
        self.column_mass = ind.muY / self.rbar
        self.n_cells = int(self.heights.sum())
        self.tall = ind.r >= N        # columns forming the tall part of Delta
        self.short = ~self.tall

    @property
    def rbar_untruncated(self) -> float:
        return self.parent.rbar

    def tall_part_mass(self) -> float:
        """mu_Delta of the tall-column part of the untruncated tower."""
        return float(np.sum(self.ind.r[self.tall] * self.parent.column_mass[self.tall]))

    # -- exact truncation identities (represented mass) ----------------------

    def identity_mean_defect(self) -> tuple[float, float]:
        """(rbar - rbar', sum_{n>N} mu_Y(r >= n)); equal up to roundoff."""
        lhs = math.fsum((self.ind.r - self.heights) * self.ind.muY)
        rhs = math.fsum(self.ind.muY[self.ind.r >= n].sum()
                        for n in range(self.N + 1, int(self.ind.r.max()) + 1))
        return lhs, rhs

    def identity_tall_mass(self) -> tuple[float, float]:
        """mu_Delta(tall part) against (N mu_Y(r>=N) + sum_{n>N} mu_Y(r>=n))/rbar."""
        lhs = self.tall_part_mass()
        tail_ge_N = float(self.ind.muY[self.ind.r >= self.N].sum())
        s = math.fsum(self.ind.muY[self.ind.r >= n].sum()
                      for n in range(self.N + 1, int(self.ind.r.max()) + 1))
        rhs = (self.N * tail_ge_N + s) / self.parent.rbar
        return lhs, rhs


def build_tower(ind: InducedMap, theta: float | None = None) -> Tower:
    return Tower(ind, theta)


def truncate(tower: Tower, N: int) -> TruncatedTower:
    parent = tower.parent if isinstance(tower, TruncatedTower) else tower
    if isinstance(tower, TruncatedTower):
        N = min(N, tower.N)
    return TruncatedTower(parent, N)


# ---------------------------------------------------------------------------
# Excursions into the tall part
# ---------------------------------------------------------------------------

def visit_measure(tower: Tower, N: int, k: int) -> tuple[float, float]:
    """Measure of tower points entering the tall part within k steps.

    Returns ``(measured, bound)`` where measured is the exact measure, in
    the piecewise-constant-density model, of the set of points whose first k
    tower iterates (including the starting point) meet a column of height
    >= N, and bound is the closed-form estimate
    (1/rbar) { sum_{n>N} mu_Y(r>=n) + (N+k) mu_Y(r>=N) }.
    """
    if k < 0 or N < 1:
        raise ValueError("need k >= 0 and N >= 1")
    ind = tower.ind
    r = ind.r
    tall = r >= N
    P = ind.transition_kernel()
    # v[b][j] = P(enter tall part within b steps | just landed on base in Y_j)
    v = np.zeros((k + 1, ind.J))
    v[:, tall] = 1.0
    for b in range(1, k + 1):
        nxt = np.zeros(ind.J)
        can = (~tall) & (r <= b)
        if np.any(can):
            nxt[can] = (P[can] * v[b - r[can]]).sum(axis=1)
        v[b] = np.where(tall, 1.0, nxt)
    measured = 0.0
    for j in range(ind.J):
        if tall[j]:
            measured += r[j] * tower.column_mass[j]
            continue
        # start at level l: the drop lands on a fresh base cell after
        # r(j) - l steps, leaving budget k - (r(j) - l)
        budgets = [k - (int(r[j]) - level) for level in range(int(r[j]))]
        budgets = [b for b in budgets if b >= 0]
        if budgets:
            acc = float(P[j] @ v[budgets].sum(axis=0))
            measured += acc * tower.column_mass[j]
    tail_ge = float(ind.muY[r >= N].sum())
    s = math.fsum(ind.muY[r >= n].sum()
                  for n in range(N + 1, int(r.max()) + 1))
    bound = (s + (N + k) * tail_ge) / tower.rbar
    return measured, bound


# ---------------------------------------------------------------------------
# Separation time and the symbolic metric
# ---------------------------------------------------------------------------

#: separation cap: pairs still together after this many returns are treated
#: as never separating (theta^60 is below double precision resolution).
SEPARATION_CAP = 60


def separation_time(tower: Tower, p: tuple[int, int, float],
                    q: tuple[int, int, float]) -> int | float:
    """Number of induced-map iterates before two tower points separate.

    Points are (column, level, base coordinate).  Points in different cells
    or on different levels separate immediately (s = 0); equal points never
    separate (s = inf).
    """
    j1, l1, y1 = p
    j2, l2, y2 = q
    if j1 != j2 or l1 != l2:
        return 0
    if y1 == y2:
        return math.inf
    ind = tower.ind
    a = np.array([y1, y2])
    for s in range(SEPARATION_CAP):
        cells = ind.cell_of(a)
        if cells[0] != cells[1] or cells[0] < 0:
            return s
        a = ind.F(int(cells[0]), a)
    return math.inf


def d_theta(tower: Tower, p, q) -> float:
    s = separation_time(tower, p, q)
    return 0.0 if s is math.inf or math.isinf(s) else tower.theta ** s
