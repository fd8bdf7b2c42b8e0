import math

import numpy as np
import pytest

from gfbsde.duality import (LinearizedCoefficients, compare_thm41, compare_thm42, find_reference_measure, linearize,
                            solve_dual)
from gfbsde.gprocess import ControlFamily
from gfbsde.model import CoefficientSet, DiscretizationGrid, GSetting, InvalidProblem, catalog_entry
from gfbsde.picard import picard_solve

S = GSetting(0.5, 1.0, 2.0, 3.0, 1, 0.5, (0.0,))


def _cs(**kw):
    base = dict(b="-0.05*x1", h="0", sigma="1", f="0.03*tanh(z) - 0.02*tanh(x1)", g="0.02*z",
                phi="0.05*log(1 + exp(x1))", L1=0.1, L2=0.05, L3=0.1)
    base.update(kw)
    return CoefficientSet.from_strings(1, **base)


def _pair(s1, c1, s2, c2, N=20, n_paths=400):
    fam = ControlFamily.bang_bang(s2, N)
    g = DiscretizationGrid.build(s2, N, width=8.0)
    kw = dict(seed=3, n_paths=n_paths, tol=1e-8)
    return picard_solve(s1, c1, g, fam, **kw), picard_solve(s2, c2, g, fam, **kw)


def test_reference_measure_tie_goes_to_first():
    # phi = x with X = B: K vanishes under every control
    c = _cs(b="0", f="0", g="0", phi="x1", L2=0.0, L3=1.0)
    _, sol = _pair(S, c, S, c)
    ref = find_reference_measure(sol)
    assert np.max(np.abs(ref.means)) <= 1e-12
    assert ref.index == 0


def test_reference_measure_convex_picks_top():
    c = _cs(b="0", f="0", g="0", phi="0.5*x1^2", L2=0.0, L3=5.0)
    _, sol = _pair(S, c, S, c, n_paths=2000)
    ref = find_reference_measure(sol)
    assert ref.control.label == "const-high"
    assert abs(ref.residual) <= 5 * ref.stderr + sol.grid.dt


def test_identical_solutions_give_zero_quotients():
    c = _cs(b="-0.05*x1 + 0.05*tanh(y)")
    a, b = _pair(S, c, S, c)
    lin = linearize(a, b, 0)
    for name in ("a1", "a2", "a3", "a4", "a5", "a6", "a7", "a8"):
        assert np.all(getattr(lin, name) == 0), name
    assert lin.ok and not lin.sum_bound_flag


def test_affine_drift_quotient():
    c = _cs(b="-0.3*x1", h="0.1*x1", L1=0.3, L2=0.0)
    s1 = GSetting(0.5, 1.0, 2.0, 3.0, 1, 0.5, (0.4,))
    a, b = _pair(s1, c, S, c)
    k = find_reference_measure(b).index
    lin = linearize(a, b, k)
    g = lin.gamma
    mask = lin.Xh[:, :-1, 0] != 0
    expect = (-0.3 + 0.1 * g)[None, :] * np.ones_like(mask)
    assert np.allclose(lin.a1[..., 0, 0][mask], expect[mask], rtol=1e-9, atol=1e-12)


def test_monotone_pair_quotient_signs():
    e1, e2 = catalog_entry("monotone-pair"), catalog_entry("monotone-pair-low")
    a, b = _pair(e1.setting, e1.coefficients, e2.setting, e2.coefficients)
    lin = linearize(a, b, find_reference_measure(b).index)
    assert np.min(lin.a8) >= -1e-12
    assert np.max(lin.a5) <= 1e-12


def _synthetic(P=200, N=25, a6=0.0, a7=0.0, a8=1.0, seed=0, gamma=0.5):
    rng = np.random.default_rng(seed)
    n = 1
    dt = 0.5 / N
    dB = math.sqrt(gamma * dt) * rng.standard_normal((P, N))
    z = lambda *s: np.zeros(s)
    X2 = np.cumsum(np.concatenate([np.zeros((P, 1)), dB], axis=1), axis=1)[:, :, None]
    Xh = 0.1 + 0.0 * X2
    return LinearizedCoefficients(z(P, N, n, n), z(P, N, n), z(P, N, n, n), z(P, N, n), z(P, N, n),
                                  np.full((P, N), a6), np.full((P, N), a7), np.full((P, n), a8),
                                  np.full(N, gamma), dB, dt, Xh, z(P, N + 1), z(P, N + 1), X2,
                                  z(P, N), z(P, N), z(P))


def test_dual_all_zero_gives_unit_density():
    lin = _synthetic(a8=0.0)
    d = solve_dual(lin)
    assert d.converged
    assert np.all(d.l == 1.0)
    assert np.allclose(d.p, 0.0) and np.allclose(d.q, 0.0)


def test_dual_decoupled_closed_form():
    lin = _synthetic(a6=0.4, a7=0.2, a8=0.7)
    d = solve_dual(lin)
    steps = 1 - 0.4 * lin.dt - 0.2 / 0.5 * lin.dB
    expect = np.concatenate([np.ones((lin.dB.shape[0], 1)), np.cumprod(steps, axis=1)], axis=1)
    assert np.allclose(d.l, expect, rtol=1e-12, atol=1e-14)
    assert d.terminal_error <= 1e-14
    assert np.allclose(d.p[:, -1, 0], 0.7 * d.l[:, -1], rtol=1e-14)


def test_dual_rejects_control_outside_band():
    lin = _synthetic(gamma=2.0)
    with pytest.raises(InvalidProblem):
        solve_dual(lin, S)


def test_shift_by_constant():
    lo = _cs()
    up = _cs(phi="0.05*log(1 + exp(x1)) + 0.3")
    r = compare_thm41((S, up), (S, lo), n_steps=20, n_paths=400)
    assert abs(r.margin - 0.3) <= 1e-10
    assert r.verdict == "PASS", r.reasons


def test_terminal_ordering_on_shift_pair():
    r = compare_thm41(catalog_entry("shift-pair"), catalog_entry("shift-pair-low"), n_steps=20, n_paths=500)
    assert r.verdict == "PASS", r.reasons
    assert r.margin > 0 and r.l_min >= -r.tol_pos


def test_terminal_ordering_reversed_is_skipped():
    r = compare_thm41(catalog_entry("shift-pair-low"), catalog_entry("shift-pair"), n_steps=20, n_paths=300)
    assert r.verdict == "SKIPPED"


def test_terminal_ordering_needs_same_start():
    s1 = GSetting(0.5, 1.0, 2.0, 3.0, 1, 0.5, (0.2,))
    with pytest.raises(InvalidProblem):
        compare_thm41((s1, _cs()), (S, _cs()))


def test_initial_state_ordering_on_monotone_pair():
    r = compare_thm42(catalog_entry("monotone-pair"), catalog_entry("monotone-pair-low"), n_steps=20, n_paths=500)
    assert r.verdict == "PASS", r.reasons
    assert r.margin >= -r.eps_num and r.p0 >= -r.budget


def test_initial_state_ordering_anti_monotone_skipped():
    c = _cs(phi="-0.05*log(1 + exp(x1))")
    s1 = GSetting(0.5, 1.0, 2.0, 3.0, 1, 0.5, (0.5,))
    r = compare_thm42((s1, c), (S, c), n_steps=20, n_paths=300)
    assert r.verdict == "SKIPPED"
    assert r.hypothesis["phi_nondecreasing"] < 0


def test_initial_state_ordering_wrong_order_skipped():
    c = _cs()
    s1 = GSetting(0.5, 1.0, 2.0, 3.0, 1, 0.5, (-0.5,))
    r = compare_thm42((s1, c), (S, c), n_steps=20, n_paths=300)
    assert r.verdict == "SKIPPED"
