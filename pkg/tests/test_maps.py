import math

import numpy as np
import pytest

from towerlab import maps, systems


@pytest.fixture(scope="module")
def pm05():
    return systems.pm_induced(0.5)


def test_evaluate_pm_right_branch():
    pm = maps.pomeau_manneville(0.5)
    assert maps.evaluate(pm, 0.75) == pytest.approx(2 * 0.75 - 1, abs=1e-15)


def test_evaluate_fixed_point():
    pm = maps.pomeau_manneville(0.5)
    assert maps.evaluate(pm, 0.0) == 0.0


def test_evaluate_doubling():
    assert maps.evaluate(maps.doubling_map(), 0.3) == pytest.approx(0.6)


def test_evaluate_domain_error():
    with pytest.raises(ValueError):
        maps.evaluate(maps.doubling_map(), 1.5)


def test_pm_alpha_validation():
    with pytest.raises(ValueError):
        maps.pomeau_manneville(1.0)


def test_branch_tie_goes_right():
    pm = maps.pomeau_manneville(0.5)
    assert pm.branch_index(np.array([0.5]))[0] == 1


def test_doubling_induces_trivially():
    ind = systems.doubling_full()
    assert ind.J == 2
    assert np.all(ind.r == 1)
    assert np.allclose(ind.muY, 0.5)       # Lebesgue
    assert ind.mean_return == pytest.approx(1.0)  # Kac, exact
    assert ind.tail_mass == 0.0


def _preimage_recursion_oracle(alpha, n):
    """xi_n by 200-step bisection of the closed-form left branch."""
    c = 2.0 ** alpha
    xi = [0.5]
    for _ in range(n):
        lo, hi = 0.0, 0.5
        for _ in range(200):
            m = 0.5 * (lo + hi)
            if m * (1 + c * m ** alpha) < xi[-1]:
                lo = m
            else:
                hi = m
        xi.append(0.5 * (lo + hi))
    return xi


def test_pm_cells_follow_preimage_recursion(pm05):
    # forward identity: the left endpoint of the return cell with r = n+1
    # maps under 2x-1 to xi_n, and T_left(xi_{n+1}) = xi_n
    xi = _preimage_recursion_oracle(0.5, 12)
    for n in range(1, 10):
        cell = pm05.cells[n]          # r = n + 1
        assert cell.r == n + 1
        img = 2 * cell.lo - 1
        assert img == pytest.approx(xi[n], abs=1e-12)
    pm = pm05.model
    for n in range(10):
        back = float(pm.branches[0].fwd(np.array([xi[n + 1]]))[0])
        assert back == pytest.approx(xi[n], abs=1e-12)


def test_pm_mu0_tail_matches_oracle(pm05):
    xi = _preimage_recursion_oracle(0.5, 12)
    for n in (2, 5, 10):
        assert pm05.mu0_tail(n) == pytest.approx(xi[n - 1], rel=1e-6)


def test_pm_tail_power_law(pm05):
    fit = maps.fit_tail_exponent(pm05, 100, 10_000)
    assert not fit.exponential_flag
    assert 1.85 <= fit.exponent <= 2.15


@pytest.mark.parametrize("alpha,lo,hi", [(0.6, 1.517, 1.817),
                                         (0.8, 1.15, 1.35)])
def test_tail_exponent_other_alphas(alpha, lo, hi):
    ind = systems.pm_induced(alpha)
    fit = maps.fit_tail_exponent(ind, 100, 10_000)
    assert lo <= fit.exponent <= hi


def test_doubling_exponential_tail_flag():
    fit = maps.fit_tail_exponent(systems.doubling_full(), 2, 8)
    assert fit.exponential_flag


def test_return_time_tail_monotone(pm05):
    vals = [maps.return_time_tail(pm05, n).total for n in range(1, 60)]
    assert all(a >= b - 1e-15 for a, b in zip(vals, vals[1:]))


def test_return_time_tail_split(pm05):
    tv = maps.return_time_tail(pm05, 10)
    assert tv.total == pytest.approx(tv.raw + tv.extrapolated)
    assert tv.raw == pytest.approx(float(pm05.muY[pm05.r > 10].sum()))


def test_mass_normalisation(pm05):
    assert pm05.muY.sum() + pm05.tail_mass == pytest.approx(1.0, abs=1e-10)


def test_bijectivity_endpoints(pm05):
    assert pm05.check_bijectivity() <= 1e-9


def test_expansion_condition(pm05):
    assert pm05.check_expansion() >= pm05.model.expansion - 1e-9


def test_backward_lipschitz(pm05):
    assert pm05.check_backward_lipschitz() <= pm05.model.dist_const


def test_distortion_fitted_below_declared(pm05):
    assert pm05.check_distortion() <= pm05.model.dist_const


def test_invariant_measure_stationary(pm05):
    P = pm05.transition_kernel()
    assert np.max(np.abs(pm05.muY @ P - pm05.muY)) <= 1e-13


def test_gibbs_weight_is_inverse_jacobian(pm05):
    x = np.array([0.6, 0.8, 0.95])
    for j in (0, 3, 7):
        y = pm05.F_inverse(j, x)
        assert np.allclose(pm05.F(j, y), x, atol=1e-10)
        g = pm05.gibbs_weight(j, x)
        assert np.allclose(g * pm05.F_deriv(j, y), 1.0, atol=1e-9)


def test_doubling_induced_exact_dyadics():
    ind = systems.doubling_induced()
    assert np.allclose(ind.muY[:5], [2.0 ** -(k + 1) for k in range(5)],
                       atol=1e-12)
    assert ind.mean_return + ind.mean_return_tail == pytest.approx(2.0,
                                                                   abs=1e-9)
    assert ind.mu0_tail(3) == pytest.approx(0.125, abs=1e-12)


def test_induce_rejects_bad_base():
    with pytest.raises(ValueError):
        maps.induce(maps.doubling_map(), (0.3, 0.9))


def test_induced_csv_roundtrip(tmp_path, pm05):
    path = tmp_path / "cells.csv"
    pm05.to_csv(path)
    rows = path.read_text().strip().split("\n")
    assert rows[0] == "j,r,lo,hi,muY"
    assert len(rows) == pm05.J + 1
