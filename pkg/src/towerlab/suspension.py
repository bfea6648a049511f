"""Suspension semiflows over towers.

Roof functions (bounded and unbounded), observables smooth along the flow,
stationary sampling, Monte-Carlo correlation estimation, and the coupled
truncation-error experiments.  Sampling restricted to a truncated tower (or
to the region under a truncated roof) is exactly stationary for the
truncated flow, so truncation effects are measured pathwise on a common
sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from math import comb
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss

from towerlab.maps import InducedMap
from towerlab.tower import Tower, TruncatedTower, build_tower, truncate

__all__ = [
    "RoofFunction",
    "constant_roof",
    "cosine_roof",
    "power_singularity_roof",
    "Observable",
    "coordinate_observable",
    "trig_flow_observable",
    "flow_periodic_observable",
    "smoothed_indicator_observable",
    "SuspensionModel",
    "FlowState",
    "CorrelationSeries",
    "sample_stationary",
    "flow",
    "correlation_mc",
    "truncation_error_experiment",
    "roof_truncation_experiment",
    "buffer_modify",
    "fit_decay",
    "roof_tail_profile",
]


# ---------------------------------------------------------------------------
# Roof functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoofFunction:
    """Positive roof over the ambient interval, evaluated through the
    tower projection.  ``tail_exponent`` declares the decay exponent of
    mu(h > n) for unbounded roofs (beta + 1)."""

    name: str
    func: Callable[[np.ndarray], np.ndarray]
    bounded: bool = True
    inf_floor: float = 1.0           # declared essential infimum
    holder_const: float = 10.0
    eta: float = 1.0
    tail_exponent: float | None = None
    cap: float | None = None         # truncation level, None if untruncated

    def __call__(self, x) -> np.ndarray:
        v = self.func(np.asarray(x, dtype=float))
        if self.cap is not None:
            v = np.minimum(v, self.cap)
        return v

    def truncated(self, N: float) -> "RoofFunction":
        cap = N if self.cap is None else min(self.cap, N)
        return RoofFunction(name=f"{self.name}|min({N:g})", func=self.func,
                            bounded=True, inf_floor=min(self.inf_floor, N),
                            holder_const=self.holder_const, eta=self.eta,
                            tail_exponent=self.tail_exponent, cap=cap)


def constant_roof(c: float = 1.0) -> RoofFunction:
    return RoofFunction(name=f"const({c:g})", func=lambda x: np.full_like(x, c),
                        inf_floor=c, holder_const=0.0)


def cosine_roof(mean: float = 2.0, amp: float = 1.0) -> RoofFunction:
    if mean - abs(amp) <= 0:
        raise ValueError("roof must stay positive")
    return RoofFunction(name=f"cos({mean:g},{amp:g})",
                        func=lambda x: mean + amp * np.cos(2.0 * np.pi * x),
                        inf_floor=mean - abs(amp),
                        holder_const=2.0 * np.pi * abs(amp))


def power_singularity_roof(beta: float = 1.0) -> RoofFunction:
    """Unbounded roof 1 + x^(-1/(beta+1)); mu_Leb(h > n) ~ n^-(beta+1)."""
    p = 1.0 / (beta + 1.0)
    return RoofFunction(name=f"signular(beta={beta:g})",
                        func=lambda x: 1.0 + np.maximum(x, 1e-300) ** (-p),
                        bounded=False, inf_floor=1.0,
                        holder_const=math.inf, tail_exponent=beta + 1.0)


# ---------------------------------------------------------------------------
# Observables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Observable:
    """Observable v(x, u) on the suspension; ``func`` receives the ambient
    position, the flow height u, and the roof value at the position."""

    name: str
    func: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    smoothness: int = 2   # flow-direction derivatives assumed bounded

    def __call__(self, pos, u, h) -> np.ndarray:
        return self.func(np.asarray(pos, dtype=float),
                         np.asarray(u, dtype=float),
                         np.asarray(h, dtype=float))

    def eval_state(self, model: "SuspensionModel", st: "FlowState") -> np.ndarray:
        return self(st.pos, st.u, model.roof(st.pos))

    def norm_surrogate(self, model: "SuspensionModel", n_grid: int = 400,
                       seed: int = 7) -> float:
        """Sampled sup of |v| and its flow derivatives up to ``smoothness``."""
        rng = np.random.default_rng(seed)
        st = sample_stationary(model, n_grid, seed=seed)
        h = model.roof(st.pos)
        tot = float(np.max(np.abs(self(st.pos, st.u, h))))
        dt = 1e-3
        for k in range(1, self.smoothness + 1):
            # central difference of order k along u, clipped inside [0, h)
            offs = np.arange(-k, k + 1)
            coef = np.array([_fd_weight(k, i, offs) for i in range(len(offs))])
            base = np.clip(st.u, k * dt, h * (1 - 1e-9) - k * dt)
            val = sum(c * self(st.pos, base + o * dt, h)
                      for c, o in zip(coef, offs))
            tot = max(tot, float(np.max(np.abs(val / dt ** k))))
        _ = rng
        return tot


def _fd_weight(order: int, i: int, offs: np.ndarray) -> float:
    """Finite-difference weight for the ``order``-th derivative at 0."""
    n = len(offs)
    A = np.vander(offs, n, increasing=True).T.astype(float)
    b = np.zeros(n)
    b[order] = math.factorial(order)
    return float(np.linalg.solve(A, b)[i])


def coordinate_observable(center: float = 0.5) -> Observable:
    return Observable(name="coordinate",
                      func=lambda x, u, h: x - center, smoothness=3)


def trig_flow_observable() -> Observable:
    """sin(2*pi*u/h(x)): smooth along each flight, aligned with the roof."""
    return Observable(name="trig_flow",
                      func=lambda x, u, h: np.sin(2.0 * np.pi * u / h),
                      smoothness=3)


def flow_periodic_observable() -> Observable:
    """cos(2*pi*u): period-1 in flow time; rigid under a constant roof 1."""
    return Observable(name="flow_periodic",
                      func=lambda x, u, h: np.cos(2.0 * np.pi * u),
                      smoothness=3)


def smoothed_indicator_observable(a: float = 0.25, b: float = 0.75,
                                  width: float = 0.1) -> Observable:
    def smooth01(t):
        t = np.clip(t, 0.0, 1.0)
        return t * t * (3.0 - 2.0 * t)

    def f(x, u, h):
        return smooth01((x - a) / width) * smooth01((b - x) / width)

    return Observable(name="indicator_smoothed", func=f, smoothness=3)


OBSERVABLES = {
    "coordinate": coordinate_observable,
    "trig_flow": trig_flow_observable,
    "flow_periodic": flow_periodic_observable,
    "indicator_smoothed": smoothed_indicator_observable,
}

ROOFS = {
    "constant": constant_roof,
    "cosine": cosine_roof,
    "power_singularity": power_singularity_roof,
}


# ---------------------------------------------------------------------------
# Suspension model: tower + roof with per-cell tables
# ---------------------------------------------------------------------------

_GAUSS_NODES, _GAUSS_WEIGHTS = leggauss(8)


class SuspensionModel:
    """Suspension of a tower under a roof, with per-cell quadrature tables.

    Cells are indexed flat, column-major: cell (j, l) at flat index
    offsets[j] + l.  Per cell we store the quadrature mean of the roof over
    the projected cell, a rejection envelope, and the cell measure.
    """

    def __init__(self, tower: Tower, roof: RoofFunction) -> None:
        self.tower = tower
        self.roof = roof
        ind = tower.ind
        heights = tower.heights
        self.offsets = np.concatenate([[0], np.cumsum(heights)])
        n_cells = int(self.offsets[-1])
        self.cell_col = np.repeat(np.arange(ind.J), heights)
        self.cell_level = np.concatenate(
            [np.arange(h) for h in heights]).astype(int)
        self.cell_mass = tower.column_mass[self.cell_col]
        hbar_cell = np.empty(n_cells)
        hmax_cell = np.empty(n_cells)
        for j in range(ind.J):
            nodes = ind.lo[j] + (0.5 + 0.5 * _GAUSS_NODES) * (ind.hi[j] - ind.lo[j])
            nodes = np.append(nodes, [ind.lo[j], ind.hi[j] - 1e-15 * ind.hi[j]])
            pos = tower.column_positions(j, nodes)
            hv = roof(pos)
            sl = slice(self.offsets[j], self.offsets[j + 1])
            hbar_cell[sl] = 0.5 * (hv[:, :8] @ _GAUSS_WEIGHTS)
            hmax_cell[sl] = hv.max(axis=1) * 1.05
        self.hbar_cell = hbar_cell
        self.hmax_cell = hmax_cell
        self.hbar = float(np.sum(self.cell_mass * hbar_cell))
        w = self.cell_mass * hbar_cell
        self.flow_cdf = np.cumsum(w / w.sum())

    @property
    def ind(self) -> InducedMap:
        return self.tower.ind

    def heights_of(self, cols) -> np.ndarray:
        return self.tower.heights[cols]


@dataclass
class FlowState:
    """Point ensemble on the suspension: tower column, level, base
    coordinate, ambient position T^level(y), and flow height u."""

    col: np.ndarray
    level: np.ndarray
    y: np.ndarray
    pos: np.ndarray
    u: np.ndarray
    oob: int = 0   # drops that landed past the represented cells

    def copy(self) -> "FlowState":
        return FlowState(self.col.copy(), self.level.copy(), self.y.copy(),
                         self.pos.copy(), self.u.copy(), self.oob)

    def __len__(self) -> int:
        return len(self.col)


def sample_stationary(model: SuspensionModel, n: int, seed: int) -> FlowState:
    """Draw n points from the stationary flow measure.

    Cells are drawn with probability proportional to measure times mean
    roof; within a cell the base coordinate is drawn with density
    proportional to the roof (rejection against the cell envelope), and u
    uniformly under the roof at the drawn position.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(np.random.Philox(key=seed))
    ind = model.ind
    cells = np.searchsorted(model.flow_cdf, rng.random(n), side="right")
    cells = np.minimum(cells, len(model.flow_cdf) - 1)
    col = model.cell_col[cells]
    level = model.cell_level[cells]
    lo, wid = ind.lo[col], ind.widths[col]
    env = model.hmax_cell[cells]
    y = np.empty(n)
    pos = np.empty(n)
    todo = np.arange(n)
    for _ in range(200):
        cand = lo[todo] + rng.random(len(todo)) * wid[todo]
        cpos = _project(model, col[todo], level[todo], cand)
        ok = rng.random(len(todo)) * env[todo] <= model.roof(cpos)
        y[todo[ok]] = cand[ok]
        pos[todo[ok]] = cpos[ok]
        todo = todo[~ok]
        if len(todo) == 0:
            break
    else:
        raise ArithmeticError("rejection sampling failed to terminate")
    u = rng.random(n) * model.roof(pos)
    return FlowState(col=col, level=level, y=y, pos=pos, u=u)


def _project(model: SuspensionModel, col, level, y) -> np.ndarray:
    out = np.asarray(y, dtype=float).copy()
    steps = np.asarray(level, dtype=int).copy()
    while steps.max(initial=0) > 0:
        act = steps > 0
        out[act] = model.ind.model.apply(out[act])
        steps[act] -= 1
    return out


def flow(model: SuspensionModel, st: FlowState, t: float,
         inplace: bool = False) -> FlowState:
    """Advance the ensemble by flow time t >= 0 under the identifications."""
    if t < 0:
        raise ValueError("flow time must be nonnegative")
    if not inplace:
        st = st.copy()
    ind = model.ind
    heights = model.tower.heights
    rem = np.full(len(st), float(t))
    h = model.roof(st.pos)
    if np.any((st.u < 0) | (st.u >= h)):
        raise ValueError("flow height u outside [0, h(x))")
    for _ in range(10_000_000):
        fits = st.u + rem < h
        st.u[fits] += rem[fits]
        rem[fits] = 0.0
        cross = np.nonzero(~fits)[0]
        if len(cross) == 0:
            break
        rem[cross] -= h[cross] - st.u[cross]
        st.u[cross] = 0.0
        lv = st.level[cross] + 1
        drop = lv >= heights[st.col[cross]]
        climb = cross[~drop]
        st.level[climb] += 1
        st.pos[climb] = ind.model.apply(st.pos[climb])
        dropi = cross[drop]
        if len(dropi) > 0:
            # complete the return: T applied (r - level) more times from pos
            extra = ind.r[st.col[dropi]] - st.level[dropi]
            p = st.pos[dropi].copy()
            while extra.max(initial=0) > 0:
                act = extra > 0
                p[act] = ind.model.apply(p[act])
                extra[act] -= 1
            newcol = ind.cell_of(p)
            bad = newcol < 0
            if np.any(bad):
                st.oob += int(bad.sum())
                # park tail landings in the deepest represented cell
                deep = int(np.argmax(ind.r))
                p[bad] = np.clip(p[bad], ind.lo[deep],
                                 ind.hi[deep] - 1e-12 * ind.hi[deep])
                newcol[bad] = deep
            st.col[dropi] = newcol
            st.level[dropi] = 0
            st.y[dropi] = p
            st.pos[dropi] = p
        h[cross] = model.roof(st.pos[cross])
    else:
        raise ArithmeticError("flow did not terminate")
    return st


# ---------------------------------------------------------------------------
# Correlation estimation
# ---------------------------------------------------------------------------

@dataclass
class CorrelationSeries:
    t: np.ndarray
    rho: np.ndarray
    stderr: np.ndarray
    n_samples: int
    seed: int
    meta: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,rho,stderr,n_samples,seed\n")
            for t, r, s in zip(self.t, self.rho, self.stderr):
                fh.write(f"{t:.17g},{r:.17g},{s:.17g},"
                         f"{self.n_samples},{self.seed}\n")


N_BATCHES = 32


def _batched_cov(v: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    """Covariance estimate with a batch-means standard error."""
    n = len(v)
    nb = min(N_BATCHES, n)
    edges = np.linspace(0, n, nb + 1).astype(int)
    est = np.empty(nb)
    for b in range(nb):
        sl = slice(edges[b], edges[b + 1])
        est[b] = np.mean(v[sl] * w[sl]) - np.mean(v[sl]) * np.mean(w[sl])
    total = float(np.mean(v * w) - np.mean(v) * np.mean(w))
    return total, float(np.std(est, ddof=1) / math.sqrt(nb))


def correlation_mc(model: SuspensionModel, v: Observable, w: Observable,
                   t_grid, n_samples: int, seed: int) -> CorrelationSeries:
    """Ensemble correlation estimator over stationary samples.

    rho(t) = mean(v * w o flow_t) - mean(v) mean(w o flow_t), with standard
    errors from batch means.  Deterministic for a fixed seed.
    """
    if n_samples < 100:
        raise ValueError("fewer than 100 samples makes the estimator "
                         "meaningless; refuse")
    t_grid = np.sort(np.asarray(t_grid, dtype=float))
    st0 = sample_stationary(model, n_samples, seed)
    vvals = v.eval_state(model, st0)
    rho = np.empty(len(t_grid))
    err = np.empty(len(t_grid))
    st = st0.copy()
    prev_t = 0.0
    for i, t in enumerate(t_grid):
        st = flow(model, st, t - prev_t, inplace=True)
        prev_t = t
        wvals = w.eval_state(model, st)
        rho[i], err[i] = _batched_cov(vvals, wvals)
    return CorrelationSeries(t=t_grid, rho=rho, stderr=err,
                             n_samples=n_samples, seed=seed,
                             meta={"roof": model.roof.name})


# ---------------------------------------------------------------------------
# Truncation experiments
# ---------------------------------------------------------------------------

def _restrict(st: FlowState, keep: np.ndarray) -> FlowState:
    return FlowState(st.col[keep], st.level[keep], st.y[keep],
                     st.pos[keep], st.u[keep])


@dataclass
class TruncationRow:
    N: int
    t: float
    measured: float
    stderr: float
    bound: float

    @property
    def ratio(self) -> float:
        return self.measured / self.bound if self.bound > 0 else math.inf


@dataclass
class TruncationTable:
    rows: list[TruncationRow]
    fitted_C: float
    stable_within: float
    kept_fraction: float

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("N,t,measured,stderr,bound,ratio\n")
            for r in self.rows:
                fh.write(f"{r.N},{r.t:.17g},{r.measured:.17g},"
                         f"{r.stderr:.17g},{r.bound:.17g},{r.ratio:.17g}\n")


def _ratio_stability(rows: list[TruncationRow]) -> tuple[float, float, float]:
    """Fitted constant and spread over noise-significant grid points."""
    sig = [r.ratio for r in rows if r.measured > 2.0 * r.stderr and r.bound > 0]
    if not sig:
        return 0.0, 1.0, 0.0
    fitted = float(np.exp(np.mean(np.log(sig))))
    spread = max(sig) / min(sig)
    return fitted, spread, max(sig)


def truncation_error_experiment(ind: InducedMap, roof: RoofFunction,
                                v: Observable, w: Observable,
                                N_list, t_grid, n_samples: int,
                                seed: int, theta: float | None = None
                                ) -> TruncationTable:
    """Pathwise |rho - rho'| for tower truncation at each N, against the
    tail bound sum_{n>N} mu_Y(r>=n) + (N+t) mu_Y(r>=N).

    One stationary sample of the full flow is drawn; the sub-ensemble on
    levels below the cut is exactly stationary for the truncated flow, so
    the difference isolates the truncation effect.
    """
    if not roof.bounded:
        raise ValueError("roof is unbounded: use roof_truncation_experiment")
    base_tower = build_tower(ind, theta)
    model = SuspensionModel(base_tower, roof)
    st0 = sample_stationary(model, n_samples, seed)
    v0 = v.eval_state(model, st0)
    rows: list[TruncationRow] = []
    kept_min = 1.0
    for N in sorted(N_list):
        tt = truncate(base_tower, int(N))
        model_t = SuspensionModel(tt, roof)
        keep = st0.level < tt.heights[st0.col]
        kept_min = min(kept_min, float(keep.mean()))
        stt = _restrict(st0, keep)
        vt = v0[keep]
        full = st0.copy()
        prev = 0.0
        for t in np.sort(np.asarray(t_grid, dtype=float)):
            full = flow(model, full, t - prev, inplace=True)
            stt = flow(model_t, stt, t - prev, inplace=True)
            prev = t
            w_full = w.eval_state(model, full)
            w_trunc = w.eval_state(model_t, stt)
            rho_f, e_f = _batched_cov(v0, w_full)
            rho_t, e_t = _batched_cov(vt, w_trunc)
            measured = abs(rho_f - rho_t)
            stderr = math.hypot(e_f, e_t)
            tail_gt = math.fsum(ind.muY[ind.r >= n].sum()
                                for n in range(int(N) + 1, int(ind.r.max()) + 1))
            tail_ge = float(ind.muY[ind.r >= N].sum())
            bound = tail_gt + (N + t) * tail_ge
            rows.append(TruncationRow(int(N), float(t), measured, stderr, bound))
    fitted, spread, _ = _ratio_stability(rows)
    return TruncationTable(rows=rows, fitted_C=fitted, stable_within=spread,
                           kept_fraction=kept_min)


def roof_truncation_experiment(ind: InducedMap, roof: RoofFunction,
                               v: Observable, w: Observable,
                               N_list, t_grid, n_samples: int, seed: int,
                               q_log_trunc: float | None = None,
                               theta: float | None = None) -> dict:
    """Pathwise |rho - rho'| for the roof truncation h' = min(h, N) against
    the bound N^-beta + t N^-(beta+1); optionally also applies the second
    truncation r' = min(r, [q ln N]) and reports its extra error.

    Requires an unbounded roof with a declared tail exponent and an induced
    map with exponential return tails.
    """
    if roof.bounded:
        raise ValueError("roof is bounded: use truncation_error_experiment")
    if roof.tail_exponent is None:
        raise ValueError("unbounded roof needs a declared tail exponent")
    beta = roof.tail_exponent - 1.0
    base_tower = build_tower(ind, theta)
    model = SuspensionModel(base_tower, roof)
    st0 = sample_stationary(model, n_samples, seed)
    v0 = v.eval_state(model, st0)
    rows: list[TruncationRow] = []
    second: list[TruncationRow] = []
    for N in sorted(N_list):
        roof_t = roof.truncated(float(N))
        model_t = SuspensionModel(base_tower, roof_t)
        keep = st0.u < roof_t(st0.pos)
        stt = _restrict(st0, keep)
        vt = v0[keep]
        # second truncation: also cap tower columns at q ln N
        if q_log_trunc is not None:
            L = max(1, int(q_log_trunc * math.log(N)))
            tt2 = truncate(base_tower, L)
            model_2 = SuspensionModel(tt2, roof_t)
            keep2 = keep & (st0.level < tt2.heights[st0.col])
            st2 = _restrict(st0, keep2)
            v2 = v0[keep2]
        full = st0.copy()
        prev = 0.0
        for t in np.sort(np.asarray(t_grid, dtype=float)):
            full = flow(model, full, t - prev, inplace=True)
            stt = flow(model_t, stt, t - prev, inplace=True)
            rho_f, e_f = _batched_cov(v0, w.eval_state(model, full))
            rho_t, e_t = _batched_cov(vt, w.eval_state(model_t, stt))
            rows.append(TruncationRow(int(N), float(t),
                                      abs(rho_f - rho_t), math.hypot(e_f, e_t),
                                      N ** (-beta) + t * N ** (-(beta + 1.0))))
            if q_log_trunc is not None:
                st2 = flow(model_2, st2, t - prev, inplace=True)
                rho_2, e_2 = _batched_cov(v2, w.eval_state(model_2, st2))
                second.append(TruncationRow(
                    int(N), float(t), abs(rho_t - rho_2), math.hypot(e_t, e_2),
                    t * float(N) ** (-(_exp_rate(ind) * q_log_trunc - 1.0))))
            prev = t
    fitted, spread, _ = _ratio_stability(rows)
    out = {"rows": rows, "fitted_C": fitted, "stable_within": spread}
    if q_log_trunc is not None:
        f2, s2, _ = _ratio_stability(second)
        out["second_rows"] = second
        out["second_fitted_C"] = f2
    return out


def _exp_rate(ind: InducedMap) -> float:
    """Exponential decay rate c of mu_Y(r > n), fitted on exact widths."""
    ns = np.arange(2, min(20, int(ind.r.max())))
    vals = np.array([ind.mu0_tail(int(n)) for n in ns])
    keep = vals > 0
    c, _ = np.polyfit(ns[keep], np.log(vals[keep]), 1)
    return -float(c)


def roof_tail_profile(model: SuspensionModel, n_grid) -> np.ndarray:
    """mu_Delta(cells where the cell sup of h exceeds n), per n."""
    sup_cell = model.hmax_cell / 1.05
    out = np.array([float(model.cell_mass[sup_cell >= n].sum())
                    for n in n_grid])
    return out


def flow_visit_measure(model: SuspensionModel, N: float, k: float,
                       nodes_per_cell: int = 12) -> tuple[float, float]:
    """Measure of suspension points reaching the region {h > N} within
    flow time k, with the explicit excursion bound.

    Returns (measured, bound): measured integrates, per cell and position,
    the exact u-interval that enters within time k (points starting inside
    the region count at time 0); the bound is
    (1/hbar) { int h 1_{h>N} dmu + k mu(h > N) }.
    """
    if k < 0 or N <= 0:
        raise ValueError("need k >= 0 and N > 0")
    tower = model.tower
    ind = model.ind
    qn, qw = leggauss(nodes_per_cell)
    wts = 0.5 * qw  # weights of the normalised within-cell average
    # flat ensemble: every tower cell carries its quadrature nodes
    cols, levels, poss, bases, weights = [], [], [], [], []
    for j in range(ind.J):
        x = ind.lo[j] + (0.5 + 0.5 * qn) * (ind.hi[j] - ind.lo[j])
        stack = tower.column_positions(j, x)  # (r_j, nodes)
        r_j = stack.shape[0]
        cols.append(np.full(r_j * len(x), j))
        levels.append(np.repeat(np.arange(r_j), len(x)))
        poss.append(stack.reshape(-1))
        bases.append(np.tile(x, r_j))
        weights.append(np.full(r_j, tower.column_mass[j])[:, None]
                       * wts[None, :])
    col = np.concatenate(cols)
    level = np.concatenate(levels)
    pos = np.concatenate(poss)
    ybase = np.concatenate(bases)
    w = np.concatenate([a.reshape(-1) for a in weights])
    h0 = np.asarray(model.roof(pos), dtype=float)
    hcur = h0.copy()
    entry = np.where(h0 > N, 0.0, np.inf)
    acc = np.zeros_like(pos)
    max_steps = int(k / max(model.roof.inf_floor, 1e-9)) + 3
    for _ in range(max_steps):
        acc = acc + hcur
        drop = level + 1 >= tower.heights[col]
        if np.any(drop):
            yn = ind.F(col[drop], ybase[drop])
            cn = np.maximum(ind.cell_of(yn), 0)
            ybase[drop] = yn
            pos[drop] = yn
            col[drop] = cn
            level[drop] = 0
        climb = ~drop
        pos[climb] = ind.model.apply(pos[climb])
        level[climb] += 1
        hcur = np.asarray(model.roof(pos), dtype=float)
        hit = (hcur > N) & (acc < entry)
        entry[hit] = acc[hit]
        if np.all(acc > k + 1e-12):
            break
    # u-interval entering by time k: u >= entry - k, u < h0
    length = np.where(np.isinf(entry), 0.0,
                      np.clip(h0 - np.maximum(entry - k, 0.0), 0.0, h0))
    measured = float(np.sum(w * length))
    big = h0 > N
    bound = float(np.sum(w * h0 * big)) + k * float(np.sum(w * big))
    return measured / model.hbar, bound / model.hbar


# ---------------------------------------------------------------------------
# Buffered observables across the truncation seam
# ---------------------------------------------------------------------------

def _smoothstep(m: int, t: np.ndarray) -> np.ndarray:
    """Polynomial step with m vanishing derivatives at both ends."""
    t = np.clip(t, 0.0, 1.0)
    acc = np.zeros_like(t)
    for k in range(m + 1):
        acc += comb(m + k, k) * comb(2 * m + 1, m - k) * (-t) ** k
    return t ** (m + 1) * acc


@dataclass(frozen=True)
class BufferedObservable:
    """Observable modified on the top strip of truncated tall columns so
    that flow smoothness holds across the new identification."""

    base: Observable
    model: "SuspensionModel"
    blend_fraction: float = 0.25
    name: str = "buffered"

    @property
    def smoothness(self) -> int:
        return self.base.smoothness

    def __call__(self, pos, u, h) -> np.ndarray:
        # off-strip evaluation falls back to the base observable
        return self.base(pos, u, h)

    def eval_state(self, model: "SuspensionModel", st: FlowState) -> np.ndarray:
        vals = self.base.eval_state(model, st)
        tower = self.model.tower
        if not isinstance(tower, TruncatedTower):
            return vals
        h = model.roof(st.pos)
        on_strip = tower.tall[st.col] & (st.level == tower.heights[st.col] - 1)
        tau = (st.u - (1 - self.blend_fraction) * h) / (self.blend_fraction * h)
        sel = np.nonzero(on_strip & (tau > 0))[0]
        if len(sel) == 0:
            return vals
        m = self.base.smoothness
        chi = _smoothstep(m, tau[sel])
        vals[sel] = vals[sel] + chi * self._seam_correction(
            st, sel, st.u[sel] - h[sel])
        return vals

    def _seam_correction(self, st: FlowState, sel: np.ndarray,
                         dt: np.ndarray) -> np.ndarray:
        """Taylor polynomial of the flow-derivative mismatch at the seam.

        Orders 1..m of d/dt v(flow) from the post-drop point minus the
        one-sided derivatives at the strip top; the order-0 profile of v is
        untouched (observables that are independent of the flow height pass
        through unchanged)."""
        ind = self.model.ind
        ynew = ind.F(st.col[sel], st.y[sel])
        hn = self.model.roof(ynew)
        pos = st.pos[sel]
        h = self.model.roof(pos)
        m = self.base.smoothness
        step = 1e-3
        ones = np.ones_like(ynew)
        out = np.zeros(len(sel))
        for k in range(1, m + 1):
            offs = np.arange(0, k + 2)
            cs = [_fd_weight(k, i, offs) for i in range(len(offs))]
            fwd = sum(c * self.base(ynew, o * step * ones, hn)
                      for c, o in zip(cs, offs)) / step ** k
            back = sum(c * self.base(pos, h - o * step, h)
                       for c, o in zip(cs, offs)) / (-step) ** k
            out += (fwd - back) * dt ** k / math.factorial(k)
        return out


def buffer_modify(v: Observable, model: SuspensionModel,
                  blend_fraction: float = 0.25) -> tuple[BufferedObservable, dict]:
    """Blend v on the top strip of truncated columns toward its continuation
    past the new identification.  Returns the modified observable and a
    report (norm ratio, measure of the modified region)."""
    tower = model.tower
    if not isinstance(tower, TruncatedTower):
        raise ValueError("buffering applies to truncated towers")
    buffered = BufferedObservable(base=v, model=model,
                                  blend_fraction=blend_fraction,
                                  name=f"buffered({v.name})")
    strip_cells = tower.tall
    strip_mass = float(tower.column_mass[strip_cells].sum())
    base_norm = v.norm_surrogate(model)
    buf_norm = _buffered_norm_surrogate(buffered, model)
    report = {
        "strip_mass_tower": strip_mass,
        "strip_mass_matches_tail": float(tower.ind.muY[tower.ind.r >= tower.N].sum()
                                         / tower.rbar),
        "modified_fraction_of_strip": blend_fraction,
        "norm_ratio": buf_norm / base_norm if base_norm > 0 else 1.0,
    }
    return buffered, report


def _buffered_norm_surrogate(b: BufferedObservable, model: SuspensionModel,
                             n_grid: int = 400, seed: int = 7) -> float:
    st = sample_stationary(model, n_grid, seed=seed)
    tot = float(np.max(np.abs(b.eval_state(model, st))))
    return tot


# ---------------------------------------------------------------------------
# Decay fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecayFit:
    beta: float
    gamma: float
    residual: float
    window: tuple[float, float]


def fit_decay(series: CorrelationSeries, window: tuple[float, float],
              fit_log_power: bool = False) -> DecayFit:
    """Regression of log |rho| on log t (optionally with a log log t term).

    Refuses when the window is dominated by noise (|rho| below three
    standard errors)."""
    t, rho, err = series.t, series.rho, series.stderr
    sel = (t >= window[0]) & (t <= window[1]) & (t > 1.0)
    if not np.any(sel):
        raise ValueError("empty fit window")
    noisy = np.abs(rho[sel]) <= 3.0 * err[sel]
    if np.mean(noisy) > 0.2:
        raise ValueError("window dominated by noise; refuse to fit")
    tt, rr = t[sel], np.abs(rho[sel])
    keep = rr > 0
    tt, rr = tt[keep], rr[keep]
    L = np.log(tt)
    cols = [np.ones_like(L), -L]
    if fit_log_power:
        cols.append(np.log(L))
    A = np.column_stack(cols)
    coef, res, *_ = np.linalg.lstsq(A, np.log(rr), rcond=None)
    resid = float(np.sqrt(res[0] / len(L))) if len(res) else 0.0
    return DecayFit(beta=float(coef[1]),
                    gamma=float(coef[2]) if fit_log_power else 0.0,
                    residual=resid, window=(float(window[0]), float(window[1])))
