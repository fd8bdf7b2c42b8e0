import math

import numpy as np
import pytest

from gfbsde.catalog import linear_riccati_slope
from gfbsde.gprocess import ControlFamily, PathEnsemble, VolatilityControl, sample_paths
from gfbsde.model import CoefficientSet, DiscretizationGrid, GSetting, catalog_entry
from gfbsde.sde import Feedback, NumericalAbort, euler_forward, sde_stability_check

S = GSetting(0.5, 1.0, 2.0, 3.0, 1, 1.0, (0.3,))


def _coeffs(**kw):
    base = dict(b="0", h="0", sigma="0", f="0", g="0", phi="0", L1=1.0, L2=0.0, L3=0.0)
    base.update(kw)
    return CoefficientSet.from_strings(1, **base)


def test_zero_coefficients_freeze_state():
    g = DiscretizationGrid.build(S, 25)
    ens = sample_paths(g, VolatilityControl((0.5,) * 25), 200, 3, S)
    sol = euler_forward(_coeffs(), g, ens, S.x0)
    assert np.all(sol.states == 0.3)


def test_classical_variance_of_terminal_state():
    s = GSetting(0.7, 0.7, 2.0, 3.0, 1, 1.0, (0.0,), classical=True)
    g = DiscretizationGrid.build(s, 20)
    P = 50_000
    ens = sample_paths(g, VolatilityControl((0.49,) * 20), P, 9, s)
    xT = euler_forward(_coeffs(sigma="1"), g, ens, s.x0).terminal[:, 0]
    se = 0.49 * math.sqrt(2.0 / P)
    assert abs(xT.var() - 0.49) <= 5 * se


def test_qv_drift_sandwich():
    g = DiscretizationGrid.build(S, 40)
    c = 0.7
    for ctl in ControlFamily.bang_bang(S, 40, include_mid=True):
        ens = sample_paths(g, ctl, 20, 0, S)
        move = euler_forward(_coeffs(h=str(c)), g, ens, S.x0).terminal[:, 0] - 0.3
        assert np.all(move >= c * 0.25 - 1e-12) and np.all(move <= c * 1.0 + 1e-12)


def test_same_seed_bit_identical_states():
    e = catalog_entry("weakly-coupled")
    g = DiscretizationGrid.build(e.setting, 30)
    ctl = ControlFamily.bang_bang(e.setting, 30)[2]
    a = euler_forward(e.coefficients, g, sample_paths(g, ctl, 300, 8, e.setting), e.setting.x0, 0.2)
    b = euler_forward(e.coefficients, g, sample_paths(g, ctl, 300, 8, e.setting), e.setting.x0, 0.2)
    assert np.array_equal(a.states, b.states)


def test_stability_identical_inputs_zero_lhs():
    e = catalog_entry("weakly-coupled")
    g = DiscretizationGrid.build(e.setting, 30)
    fam = ControlFamily.bang_bang(e.setting, 30)
    v = sde_stability_check(e.coefficients, e.setting, g, fam, 0.4, 0.4, n_paths=500, seed=1)
    assert v.passed and v.lhs == 0.0 and v.rhs == 0.0


def test_stability_zero_coupling():
    e = catalog_entry("decoupled")
    g = DiscretizationGrid.build(e.setting, 30)
    fam = ControlFamily.bang_bang(e.setting, 30)
    v = sde_stability_check(e.coefficients, e.setting, g, fam, 0.0, 1.0, n_paths=500, seed=1)
    assert v.passed and v.lhs == 0.0


def test_stability_weakly_coupled_unit_gap():
    e = catalog_entry("weakly-coupled")
    g = DiscretizationGrid.build(e.setting, 40)
    fam = ControlFamily.bang_bang(e.setting, 40)
    v = sde_stability_check(e.coefficients, e.setting, g, fam, 0.0, 1.0, n_paths=2000, seed=4)
    assert v.passed and 0 < v.lhs <= v.c1 * v.rhs


def test_blow_up_raises_numerical_abort():
    g = DiscretizationGrid.build(S, 10)
    ens = sample_paths(g, VolatilityControl((0.5,) * 10), 5, 0, S)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalAbort) as exc:
            euler_forward(_coeffs(b="1e300*exp(10*x1)"), g, ens, (1.0,))
    # first step lands near 2e303 (finite), the second overflows
    assert exc.value.step == 2 and exc.value.path == 0


def test_strong_convergence_classical_linear():
    """Euler error at X_T against the exact flow of dX = (a + c A(t)) X dt + dB."""
    e = catalog_entry("classical-linear")
    s, co = e.setting, e.coefficients
    pr = e.analytic_reference["params"]
    a, c, r, kappa = pr["a"], pr["c"], pr["r"], pr["kappa"]
    T, x0 = s.T, s.x0[0]
    k = r - a
    w = lambda t: c / k + (1 / kappa - c / k) * np.exp(k * (T - t))
    flow = lambda t: np.exp(r * t) * w(t) / w(0.0)  # d log flow = a + c/w
    fine = 5120
    P = 4000
    gf = DiscretizationGrid.build(s, fine)
    ens = sample_paths(gf, VolatilityControl((0.25,) * fine), P, 17, s)
    tm = (np.arange(fine) + 0.5) * T / fine
    exact = flow(T) * x0 + ens.increments @ (flow(T) / flow(tm))
    errs = []
    for N in (20, 40, 80):
        m = fine // N
        inc = ens.increments.reshape(P, N, m).sum(axis=2)
        qv = 0.25 * T / N * np.arange(N + 1)
        coarse = PathEnsemble(inc, qv, VolatilityControl((0.25,) * N), 17, T / N)
        g = DiscretizationGrid.build(s, N)
        fb = Feedback(lambda i, x, dt=T / N: linear_riccati_slope(i * dt, T, a, c, r, kappa) * x[:, 0])
        xT = euler_forward(co, g, coarse, s.x0, fb).terminal[:, 0]
        errs.append(np.mean(np.abs(xT - exact)))
    r1, r2 = errs[0] / errs[1], errs[1] / errs[2]
    assert 1.2 <= r1 <= 2.8 and 1.2 <= r2 <= 2.8, errs
