import math

import numpy as np
import pytest

from towerlab import systems, suspension as sp
from towerlab.transfer.basis import CylinderBasis
from towerlab.transfer.towerop import TowerGrid, laplace_series, \
    map_correlation_operator
from towerlab.transfer.operators import (assemble_R, assemble_twisted,
                                         lasota_yorke_check, resolvent_scan,
                                         tail_moment_sum,
                                         twist_perturbation_check)


@pytest.fixture(scope="module")
def bd():
    return CylinderBasis(systems.doubling_full(), depth=8, refine_symbols=2)


@pytest.fixture(scope="module")
def bp():
    return CylinderBasis(systems.pm_induced(0.5), depth=2, refine_symbols=24)


# -- basis ---------------------------------------------------------------------

def test_nesting(bd, bp):
    assert bd.check_nesting() <= 1e-10
    assert bp.check_nesting() <= 1e-10


def test_measure_consistency(bp):
    # leaf masses (collocation Perron pair) aggregate to the cell masses
    # (interval-kernel fixed point) at discretisation accuracy
    agg = np.zeros(bp.ind.J)
    np.add.at(agg, bp.col, bp.mu)
    assert np.max(np.abs(agg - bp.ind.muY / bp.ind.muY.sum())) <= 1.5e-2


def test_seminorm_constant_vanishes(bp):
    assert bp.theta_seminorm(np.ones(bp.n), 0.5) == 0.0


def test_seminorm_scales(bd):
    v = bd.mid.copy()
    a = bd.theta_seminorm(v, 0.5)
    assert bd.theta_seminorm(3.0 * v, 0.5) == pytest.approx(3.0 * a)


def test_seminorm_complex_close_to_real(bd):
    v = bd.mid.copy()
    a = bd.theta_seminorm(v, 0.5)
    b = bd.theta_seminorm(v * np.exp(0.3j), 0.5)
    assert b == pytest.approx(a, rel=2e-4)


# -- base operator ----------------------------------------------------------------

def test_R_fixes_constants(bd, bp):
    for b in (bd, bp):
        op = assemble_R(b)
        assert np.max(np.abs(op.apply(np.ones(b.n)) - 1.0)) <= 1e-10


def test_R_nonnegative(bp):
    assert np.min(assemble_R(bp).mat) >= 0.0


def test_measure_stationary(bd, bp):
    for b in (bd, bp):
        assert np.max(np.abs(b.mu @ b.Mhat - b.mu)) <= 1e-12


def test_doubling_closed_form_pointwise(bd):
    # (Rv)(x) = (v(x/2) + v((x+1)/2))/2, exact for the doubling map
    op = assemble_R(bd)
    x = np.linspace(0.05, 0.95, 7)
    got = op.pointwise_apply(lambda y: y, x)
    want = ((x / 2) + (x + 1) / 2) / 2
    assert np.max(np.abs(got - want)) <= 1e-12


def test_duality_adjoint_pairing(bd, bp):
    for b in (bd, bp):
        assert assemble_R(b).duality_defect(n_pairs=20) <= 1e-8


def test_spectral_gap_pm():
    basis = CylinderBasis(systems.pm_induced(0.5, branch_cutoff=200),
                          depth=2, refine_symbols=16)
    eigs = np.sort(np.abs(np.linalg.eigvals(basis.Mhat)))[::-1]
    assert eigs[0] == pytest.approx(1.0, abs=1e-10)
    assert eigs[1] < 1.0 - 1e-3


def test_twisted_reduces_to_R(bp):
    grid = TowerGrid(bp, sp.cosine_roof(), 30)
    op = assemble_twisted(grid, 0.0, 0.0)
    assert np.array_equal(op.mat, bp.Mhat)


def test_constant_twist_factors_out(bd):
    # doubling, h = 1, r = 1: R_{s,z} = e^{s+z} R entrywise
    grid = TowerGrid(bd, sp.constant_roof(1.0), 1)
    s, z = 0.3 + 1.1j, -0.2 + 0.4j
    op = assemble_twisted(grid, s, z)
    want = np.exp(s + z) * bd.Mhat
    assert np.max(np.abs(op.mat - want)) <= 1e-13


def test_induced_roof_seminorm_sum(bp):
    # sum_j |H' restricted to Y_j|_theta mu(Y_j) <= |h|_theta rbar
    grid = TowerGrid(bp, sp.cosine_roof(), 30)
    theta = 0.5
    ind = bp.ind
    lhs = 0.0
    for j in range(ind.J):
        sel = bp.col == j
        if sel.sum() < 2:
            continue
        Hj = grid.H_col[sel]
        gid = np.zeros(int(sel.sum()), dtype=int)
        dia = float(Hj.max() - Hj.min())
        lhs += dia / theta * float(ind.muY[j])
        _ = gid
    # |h|_theta on the tower: within-cell variation over tower cells
    hsem = 0.0
    for ell, (act, pos) in enumerate(zip(grid.active, grid.pos_at)):
        for d in range(1, bp.depth):
            gid = bp._groups[d][act]
            h = np.asarray(grid.h_at[ell])
            if len(h) > 1:
                hsem = max(hsem, bp._group_range(h, gid) / theta ** d)
    assert lhs <= hsem * grid.rbar + 1e-9


def test_lasota_yorke_constant_function(bp):
    grid = TowerGrid(bp, sp.cosine_roof(), 20)
    theta = 0.5
    op = assemble_twisted(grid, 2j, 0.0)
    v = np.ones(bp.n, dtype=complex)
    out = op.apply(v)
    # |R^1 v|_theta <= C(|b| |v|_inf + theta |v|_theta) is satisfiable with
    # |v|_theta = 0: the twisted image has finite seminorm
    assert np.isfinite(bp.theta_seminorm(out, theta))


def test_lasota_yorke_uniformity_small():
    basis = CylinderBasis(systems.pm_induced(0.5, branch_cutoff=200),
                          depth=2, refine_symbols=16)
    rep = lasota_yorke_check(basis, sp.cosine_roof(), b_list=[2, 10],
                             omega_list=[0.0], n_max=8, N_list=[20, 50],
                             n_probes=4)
    assert rep.stability <= 2.0
    # contraction visible: iterate seminorms plateau below C |b| |v|_inf
    assert rep.C < 10.0


def test_resolvent_constant_roof_flags(bd):
    bgrid = [2 * np.pi, 4 * np.pi, 5.0, 11.0]
    sc = resolvent_scan(bd, sp.constant_roof(1.0), bgrid, [0.0], C6=2.0,
                        n_random=40)
    assert list(sc.resonance) == [True, True, False, False]
    assert np.all(np.isfinite(sc.norm_estimate[~sc.resonance]))


def test_resolvent_coboundary_invariance(bd):
    # shifting the roof by a small coboundary moves norms by < 5 percent
    eps = 1e-3

    def u(x):
        return eps * np.sin(2 * np.pi * x)

    base = sp.cosine_roof()

    def shifted(x):
        Tx = np.where(x < 0.5, 2 * x, 2 * x - 1)
        return base(x) + u(Tx) - u(x)

    roof2 = sp.RoofFunction("shifted", shifted, inf_floor=0.9)
    b_grid = [3.0, 8.0]
    s1 = resolvent_scan(bd, base, b_grid, [0.0], C6=2.0, n_random=80, seed=3)
    s2 = resolvent_scan(bd, roof2, b_grid, [0.0], C6=2.0, n_random=80, seed=3)
    assert np.all(np.abs(s1.norm_estimate / s2.norm_estimate - 1.0) < 0.05)


def test_twist_perturbation_zero_at_imaginary(bp):
    rep = twist_perturbation_check(bp, sp.cosine_roof(), 2j, 0.0, N=20)
    assert rep.measured <= 1e-12


def test_twist_perturbation_bound_and_linearity(bp):
    N = 20
    a = 0.01 / N
    r1 = twist_perturbation_check(bp, sp.cosine_roof(), a + 2j, 0.0, N=N)
    assert r1.measured <= 1.0 * r1.bound_core  # C <= 1 comfortably
    r2 = twist_perturbation_check(bp, sp.cosine_roof(), a / 2 + 2j, 0.0, N=N)
    ratio = r1.measured / r2.measured
    assert 1.0 < ratio < 4.0  # within factor 2 of proportional


def test_tail_moment_sum(bp):
    ind = bp.ind
    d5 = tail_moment_sum(ind, 5)
    direct = 1.0 + sum(k * (ind.muY[ind.r >= k].sum() + ind.tail_mass)
                       for k in range(2, 6))
    assert d5 == pytest.approx(direct, rel=1e-9)


# -- tower operator -----------------------------------------------------------------

def test_tower_integral_conserved(bp):
    grid = TowerGrid(bp, None, None)
    V = grid.state_from_function(lambda x: np.cos(3 * x) + 2)
    i0 = grid.integrate(V)
    i1 = grid.integrate(grid.step(V))
    assert i1 == pytest.approx(i0, abs=1e-13)


def test_doubling_map_correlation_geometric(bd):
    c = map_correlation_operator(bd, lambda x: x - 0.5, lambda x: x - 0.5, 6)
    ratios = c[1:5] / c[0:4]
    assert np.allclose(ratios, 0.5, atol=2e-3)


def test_map_correlation_zero_for_constants(bd):
    c = map_correlation_operator(bd, lambda x: np.ones_like(x),
                                 lambda x: x, 5)
    assert np.max(np.abs(c)) <= 1e-12


def test_pm06_map_decay_window():
    ind = systems.pm_induced(0.6)
    basis = CylinderBasis(ind, depth=2, refine_symbols=50)
    c = map_correlation_operator(basis, lambda x: x - 0.5,
                                 lambda x: x - 0.5, 500)
    ns = np.unique(np.round(np.geomspace(10, 500, 40)).astype(int))
    slope = -np.polyfit(np.log(ns), np.log(np.abs(c[ns])), 1)[0]
    assert abs(slope - 2.0 / 3.0) <= 0.25


def test_laplace_constant_roof_closed_form(bd):
    grid = TowerGrid(bd, sp.constant_roof(1.0), None)
    v = sp.coordinate_observable()
    s = 0.5
    lv = laplace_series(grid, v, v, s)
    assert lv.converged
    # discretisation-exact closed form: the grid correlation of the
    # coordinate vector is 2^-n (1 - 4^{n-k})/12 at depth k
    k = 8
    var_terms = sum(math.exp(-s * n) * 2.0 ** -n * (1 - 4.0 ** (n - k)) / 12
                    for n in range(1, k + 1))
    vs = (math.e ** s - 1) / s
    ws = (1 - math.e ** (-s)) / s
    g = (math.exp(-s) - 1 + s) / s ** 2
    term0 = (1 - 4.0 ** (-k)) / 12 * g
    closed = term0 + var_terms * vs * ws
    assert abs(lv.value - closed) <= 1e-6


def test_laplace_constant_observable_small(bd):
    grid = TowerGrid(bd, sp.constant_roof(1.0), None)
    one = sp.Observable("one", lambda x, u, h: np.ones_like(x))
    w = sp.coordinate_observable()
    lv = laplace_series(grid, one, w, 0.4)
    # mean-zero projection: the series contributes nothing beyond the
    # same-flight term minus the pole part; the total stays small
    assert abs(lv.value) <= 1e-6


def test_laplace_divergence_detected(bp):
    grid = TowerGrid(bp, sp.cosine_roof(), 30)
    v = sp.coordinate_observable()
    lv = laplace_series(grid, v, v, -0.4)
    assert not lv.converged
    assert lv.abscissa_estimate is not None


def test_laplace_matches_mc_transform():
    ind = systems.pm_induced(0.5)
    basis = CylinderBasis(ind, depth=2, refine_symbols=24)
    N = 30
    grid = TowerGrid(basis, sp.cosine_roof(), N)
    v = sp.coordinate_observable()
    s = 0.3 + 2.0j
    lv = laplace_series(grid, v, v, s)
    assert lv.converged
    # MC side: quadrature Laplace transform of the truncated-flow
    # correlation function; the correlation has seam kinks, so a Richardson
    # difference of two trapezoid resolutions enters the error budget
    import towerlab.tower as tw
    model = sp.SuspensionModel(tw.truncate(tw.build_tower(ind), N),
                               sp.cosine_roof())
    t_grid = np.arange(0.0, 20.0001, 0.05)
    cs = sp.correlation_mc(model, v, v, t_grid, 200_000, seed=77)

    def transform(tt, rho):
        w = np.gradient(tt)
        return np.sum(np.exp(-s * tt) * rho * w)

    val = transform(t_grid, cs.rho)
    coarse = transform(t_grid[::5], cs.rho[::5])
    quad_err = abs(val - coarse)
    err = np.sqrt(np.sum((np.abs(np.exp(-s * t_grid)) * cs.stderr
                          * np.gradient(t_grid)) ** 2))
    tail = abs(np.exp(-s.real * t_grid[-1])) * abs(cs.rho[-1]) / s.real
    assert abs(lv.value - val) <= 3 * err + tail + quad_err + 1e-3


def test_renewal_geometric_doubling(bd):
    from towerlab.transfer.renewal import renewal_build
    grid = TowerGrid(bd, sp.constant_roof(1.0), 1)
    rd = renewal_build(grid, 0.2j, horizon=48, n_probes=4, grow=False)
    assert rd.max_residual <= 1e-10
    assert rd.recursion_residual <= 1e-10


def test_renewal_pm(bp):
    from towerlab.transfer.renewal import renewal_build
    grid = TowerGrid(bp, sp.cosine_roof(), 30)
    for s in (0.0, 0.1j, 0.3 + 2j):
        rd = renewal_build(grid, complex(s), horizon=96, n_probes=6,
                           grow=False)
        assert rd.max_residual <= 1e-8
        assert rd.recursion_residual <= 1e-8


def test_decomposition_single_level(bd):
    from towerlab.transfer.renewal import tower_operator_decomposition
    grid = TowerGrid(bd, sp.constant_roof(1.0), 1)
    rep = tower_operator_decomposition(grid, 0.1j, 1, n_probes=4)
    assert rep.residual <= 1e-12
    assert np.all(rep.e_norms == 0.0)  # no interior levels at all


def test_decomposition_pm(bp):
    from towerlab.transfer.renewal import tower_operator_decomposition
    grid = TowerGrid(bp, sp.cosine_roof(), 20)
    for n in (1, 5, 15, 21):
        rep = tower_operator_decomposition(grid, 0.1j, n, n_probes=4)
        assert rep.residual <= 1e-8
        assert rep.vanish_beyond
    # block norms decay along the return-time tail
    rep = tower_operator_decomposition(grid, 0.1j, 5, n_probes=4)
    assert rep.a_norms[0] > rep.a_norms[10] > rep.a_norms[18]


def test_rate_budget_cases():
    from towerlab.transfer import rates
    b = rates.rate_budget(beta=1.0, gamma=2.0)
    assert b.predicted_rate == "(ln t)^2 t^-1"
    assert rates.budget_matches_rate(b) < 0.05
    for beta, want in ((0.5, "N^0.5"), (1.0, "(ln N)^1"), (2.0, "bounded")):
        assert want in rates.rate_budget(beta=beta).dN_class
    with pytest.raises(ValueError):
        rates.rate_budget(beta=1.0, p=0.5)


def test_roof_sum_tail_gap():
    from towerlab.transfer import rates
    ex = rates.roof_sum_tail_example(1.0)
    assert ex.respects_bound
    assert abs(ex.log_factor_fit - 2.0) <= 0.25
    assert ex.log_factor_fit <= 2.5    # clear of the bound's exponent 3


def test_twist_perturbation_unbounded_variant():
    ind = systems.doubling_induced()
    basis = CylinderBasis(ind, depth=2, refine_symbols=8)
    roof = sp.power_singularity_roof(1.0).truncated(20.0)
    L = max(1, int(4.0 * math.log(20.0)))
    rep = twist_perturbation_check(basis, roof, 0.001 + 2j, 0.0, N=L,
                                   unbounded_variant=True, q_log=4.0)
    assert np.isfinite(rep.fitted_C)
    assert rep.measured <= rep.bound_core  # C <= 1 with margin


def test_resolvent_refinement_stability():
    # doubling the cylinder depth moves resolvent norms by < 10 percent
    b_grid = [3.0, 9.0]
    norms = {}
    for depth in (6, 12):
        basis = CylinderBasis(systems.doubling_full(), depth=depth,
                              refine_symbols=2)
        sc = resolvent_scan(basis, sp.cosine_roof(), b_grid, [0.0],
                            C6=2.0, n_random=30, seed=5)
        norms[depth] = sc.norm_estimate
    assert np.all(np.abs(norms[12] / norms[6] - 1.0) < 0.10)


def test_observable_norm_surrogate():
    import towerlab.tower as tw
    model = sp.SuspensionModel(tw.build_tower(systems.doubling_full()),
                               sp.cosine_roof())
    v = sp.coordinate_observable()
    n = v.norm_surrogate(model)
    assert 0.4 <= n <= 0.6  # sup|x - 1/2| with zero flow derivatives
    w = sp.flow_periodic_observable()
    nw = w.norm_surrogate(model)
    assert nw >= (2 * math.pi) ** 2 * 0.8  # second flow derivative peaks
