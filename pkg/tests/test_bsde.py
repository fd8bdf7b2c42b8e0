import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfbsde.bsde import (bsde_apriori_check, driving_states, dp_backward, forward_states, k_extract,
                         problem_from_inputs, solve_bsde, z_norm_check)
from gfbsde.gprocess import ControlFamily, sample_family
from gfbsde.model import CoefficientSet, DiscretizationGrid, GSetting, catalog, catalog_entry

S = GSetting(0.5, 1.0, 2.0, 3.0, 1, 1.0, (0.0,))


def _bm(**kw):
    """Forward state X = B, backward data from kw."""
    base = dict(b="0", h="0", sigma="1", f="0", g="0", phi="0", L1=1.0, L2=0.0, L3=1.0)
    base.update(kw)
    return CoefficientSet.from_strings(1, **base)


def _interior(grid, width=2.0):
    ax = grid.axis(0)
    return ax[np.abs(ax) <= width]


def test_constant_terminal():
    g = DiscretizationGrid.build(S, 30)
    sol = solve_bsde(_bm(phi="1.75"), S, g)
    assert np.all(sol.y_fn.values == 1.75)
    assert np.all(sol.z_fn.values == 0.0)


def test_linear_terminal_is_martingale():
    g = DiscretizationGrid.build(S, 30)
    sol = solve_bsde(_bm(phi="x1"), S, g)
    x = _interior(g)[:, None]
    for i in (0, 10, 29):
        assert np.allclose(sol.y_fn(i, x), x[:, 0], atol=1e-12)
        assert np.allclose(sol.z_fn(i, x), 1.0, atol=1e-10)


def test_square_terminal_uses_top_volatility():
    g = DiscretizationGrid.build(S, 100)
    sol = solve_bsde(_bm(phi="x1^2"), S, g)
    assert sol.y0(S.x0) == pytest.approx(1.0 * S.T, rel=1e-3)
    assert np.all(sol.choice[:, np.abs(g.axis(0)) < 2] == 1)


def test_k_examples_under_constant_controls():
    g = DiscretizationGrid.build(S, 50)
    sol = solve_bsde(_bm(phi="x1^2"), S, g)
    fam = ControlFamily.constants(S, 50)
    ens = sample_family(g, fam, 20_000, 3, S)
    rep = k_extract(sol, ens, [driving_states(e) for e in ens], fam)
    lo, hi = rep.kT_means
    se_lo, se_hi = rep.kT_stderrs
    assert abs(hi) <= 5 * se_hi + rep.grid_tol
    assert abs(lo - (0.25 - 1.0) * S.T) <= 5 * se_lo + rep.grid_tol
    assert rep.martingale_ok and rep.argmax == 1


@settings(max_examples=15, deadline=None)
@given(c=st.floats(-10, 10))
def test_translation_of_terminal(c):
    g = DiscretizationGrid.build(S, 20)
    base = dict(f="0.1*tanh(z) + 0.05*cos(x1)", g="0.2*z")
    a = solve_bsde(_bm(phi="log(1 + exp(x1))", **base), S, g)
    b = solve_bsde(_bm(phi=f"log(1 + exp(x1)) + ({c!r})", **base), S, g)
    assert np.allclose(b.y_fn.values - a.y_fn.values, c, atol=1e-12 * max(1.0, abs(c)))


@settings(max_examples=15, deadline=None)
@given(bump=st.floats(0, 2), centre=st.floats(-1, 1))
def test_comparison_monotone(bump, centre):
    e = catalog_entry("weakly-coupled")
    g = DiscretizationGrid.build(e.setting, 20)
    c = e.coefficients
    up = c.with_phi(lambda x: c.phi(x) + bump * np.exp(-(x[:, 0] - centre) ** 2))
    a = solve_bsde(c, e.setting, g)
    b = solve_bsde(up, e.setting, g)
    assert np.all(a.y_fn.values <= b.y_fn.values + 1e-12)


def _tree_oracle(s, T, N, f, gg, phi):
    """Recombining binomial tree for the classical equation with X = B."""
    dt = T / N
    h = s * math.sqrt(dt)
    x = h * (2 * np.arange(N + 1) - N)
    v = phi(x)
    for i in range(N - 1, -1, -1):
        x = h * (2 * np.arange(i + 1) - i)
        up, dn = v[1:], v[:-1]
        E = 0.5 * (up + dn)
        Z = (up - dn) / (2 * h)
        v = E - f(i * dt, x, E, Z) * dt - gg(i * dt, x, E, Z) * s * s * dt
    return float(v[0])


def test_classical_matches_binomial_tree():
    s = GSetting(0.8, 0.8, 2.0, 3.0, 1, 1.0, (0.0,), classical=True)
    N = 40
    co = _bm(f="0.2*tanh(y) + 0.1*z*cos(x1)", g="0.05*z - 0.1*y", phi="log(1 + exp(x1))")
    ref = _tree_oracle(0.8, 1.0, N,
                       lambda t, x, y, z: 0.2 * np.tanh(y) + 0.1 * z * np.cos(x),
                       lambda t, x, y, z: 0.05 * z - 0.1 * y,
                       lambda x: np.log1p(np.exp(x)))
    sol = solve_bsde(co, s, DiscretizationGrid.build(s, N))
    assert sol.y0(s.x0) == pytest.approx(ref, abs=1e-10)


@pytest.mark.parametrize("name", [e.name for e in catalog()])
def test_k_diagnostics_on_catalog(name):
    e = catalog_entry(name)
    s = e.setting
    g = DiscretizationGrid.build(s, 40)
    sol = solve_bsde(e.coefficients, s, g)
    fam = ControlFamily.bang_bang(s, 40)
    ens = sample_family(g, fam, 2000, 5, s)
    states = [fs.states for fs in forward_states(e.coefficients, s, g, ens, None)]
    rep = k_extract(sol, ens, states, fam)
    assert rep.monotone_ok, (rep.max_increment, rep.tol_K)
    assert rep.martingale_ok, (rep.sup_mean, rep.sup_stderr, rep.grid_tol)


def test_apriori_identical_inputs():
    e = catalog_entry("weakly-coupled")
    g = DiscretizationGrid.build(e.setting, 30)
    fam = ControlFamily.bang_bang(e.setting, 30)
    psi = lambda t, b: 0.2 + b
    v = bsde_apriori_check(e.coefficients, e.setting, g, fam, psi, psi, n_paths=500, seed=1)
    assert v.passed and v.lhs == 0.0 and v.rhs == 0.0


def test_apriori_shifted_input():
    e = catalog_entry("weakly-coupled")
    g = DiscretizationGrid.build(e.setting, 30)
    fam = ControlFamily.bang_bang(e.setting, 30)
    v = bsde_apriori_check(e.coefficients, e.setting, g, fam, lambda t, b: b, lambda t, b: b + 0.5,
                           n_paths=1000, seed=2)
    assert v.passed and v.lhs > 0 and v.ratio <= v.constant


def test_z_norm_zero_for_identical():
    e = catalog_entry("weakly-coupled")
    g = DiscretizationGrid.build(e.setting, 20)
    pb = problem_from_inputs(e.coefficients, lambda t, b: b, e.setting.T)
    sol = dp_backward(pb, g, e.setting)
    r = z_norm_check(sol, sol, e.setting, ControlFamily.bang_bang(e.setting, 20), n_paths=300)
    assert r["lhs"] == 0.0 and r["ratio"] == 0.0


def test_z_norm_ratio_bounded_under_refinement():
    e = catalog_entry("weakly-coupled")
    s = e.setting
    ratios = []
    for N in (20, 40, 80):
        g = DiscretizationGrid.build(s, N)
        a = dp_backward(problem_from_inputs(e.coefficients, lambda t, b: b, s.T), g, s)
        b = dp_backward(problem_from_inputs(e.coefficients, lambda t, b: b + 0.4 * np.sin(b), s.T), g, s)
        ratios.append(z_norm_check(a, b, s, ControlFamily.bang_bang(s, N), n_paths=1000, seed=3)["ratio"])
    assert all(np.isfinite(ratios)) and max(ratios) <= 2 * min(ratios), ratios


def test_z_norm_classical_linear_closed_form():
    """phi = x gives Y = B, Z = 1 exactly; compare against the formula on the same paths."""
    s = GSetting(0.6, 0.6, 2.0, 3.0, 1, 1.0, (0.0,), classical=True)
    N = 40
    g = DiscretizationGrid.build(s, N)
    a = dp_backward(problem_from_inputs(_bm(phi="x1"), lambda t, b: b, s.T), g, s)
    b = dp_backward(problem_from_inputs(_bm(phi="0"), lambda t, b: b, s.T), g, s)
    fam = ControlFamily.bang_bang(s, N)
    r = z_norm_check(a, b, s, fam, n_paths=4000, seed=6)
    Bp = driving_states(sample_family(g, fam, 4000, 6, s)[0])[:, :, 0]
    y = np.mean(np.max(np.abs(Bp), axis=1) ** 2)
    data = np.mean(np.max(np.abs(Bp), axis=1) ** 2)
    expect = 1.0 / (y + math.sqrt(data) * math.sqrt(y))
    assert r["ratio"] == pytest.approx(expect, rel=1e-9)
