"""Comparison experiments and the dual linear system behind them.

Two solutions of the coupled system are compared along one ensemble drawn
under a reference control gamma (the family member under which K of the
second solution is closest to zero). Their difference solves a linear
system whose coefficients a1..a8 are difference quotients; the dual system
for (l, p, q) turns the terminal gap into the initial gap::

    Y1_0 - Y2_0 = p_0 (x1 - x2) + E[l_T (phi1 - phi2)(X2_T) - int l dK1 + int l dK2]

The last term vanishes under the exact reference measure and is carried as
an error term here.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .constants import NOT_CERTIFIED, certify
from .gprocess import ControlFamily, VolatilityControl, parallel_map, sup_over_family
from .model import CoefficientSet, GSetting, InvalidProblem, ProblemCatalogEntry
from .picard import FBSDESolution, NotCertified, picard_solve
from .regression import poly_features

__all__ = [
    "ReferenceMeasure",
    "LinearizedCoefficients",
    "DualSolution",
    "DualityReport",
    "ComparisonResult",
    "find_reference_measure",
    "linearize",
    "solve_dual",
    "duality_check",
    "compare_thm41",
    "compare_thm42",
    "random_pair",
    "run_battery",
    "BATTERY_FIELDS",
]

log = logging.getLogger(__name__)

BOUND_SLACK = 1e-9


@dataclass
class ReferenceMeasure:
    index: int
    control: VolatilityControl
    residual: float  # E[K2_T] under the chosen control (<= 0 up to noise)
    stderr: float
    means: np.ndarray

    def to_dict(self):
        return {"index": self.index, "label": self.control.label, "residual": self.residual,
                "stderr": self.stderr, "per_control_mean_KT": [float(v) for v in self.means]}


def find_reference_measure(solution2: FBSDESolution, family: Optional[ControlFamily] = None) -> ReferenceMeasure:
    """Family control with the largest mean of K2_T; ties go to the lowest index."""
    family = family if family is not None else solution2.family
    if family is None or len(family) == 0:
        raise InvalidProblem("empty control family")
    rep = solution2.k_report
    if rep is None:
        raise InvalidProblem("solution 2 carries no K diagnostics (solve with the lattice backend)")
    means = np.asarray(rep.kT_means, float)
    atol = 1e-12 * max(rep.scale, 1.0)
    val, idx = sup_over_family(means, family, atol=atol)
    return ReferenceMeasure(idx, family[idx], float(val), float(rep.kT_stderrs[idx]), means)


@dataclass
class LinearizedCoefficients:
    """Difference quotients along one ensemble; arrays indexed (path, step, ...)."""

    a1: np.ndarray  # (P, N, n, n)
    a2: np.ndarray  # (P, N, n)
    a3: np.ndarray  # (P, N, n, n)
    a4: np.ndarray  # (P, N, n)
    a5: np.ndarray  # (P, N, n)
    a6: np.ndarray  # (P, N)
    a7: np.ndarray  # (P, N)
    a8: np.ndarray  # (P, n)
    gamma: np.ndarray  # (N,)
    dB: np.ndarray  # (P, N)
    dt: float
    Xh: np.ndarray  # X1 - X2, (P, N+1, n)
    Yh: np.ndarray  # (P, N+1)
    Zh: np.ndarray  # (P, N+1)
    X2: np.ndarray
    dK1: np.ndarray  # (P, N)
    dK2: np.ndarray
    phi_gap: np.ndarray  # phi1(X2_T) - phi2(X2_T), (P,)
    bounds: dict = field(default_factory=dict)
    defects: list = field(default_factory=list)
    sum_bound_flag: bool = False  # |a6| + |a7| above L1 (1 + hi^2) somewhere
    equation_residual: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.defects


def _quot(num, den, floor=0.0):
    """num / den, set to zero where |den| <= floor (roundoff-level gaps carry no slope)."""
    live = np.abs(den) > floor
    safe = np.where(live, den, 1.0)
    return np.where(live, num / safe, 0.0)


def _floor(a, b):
    return 64 * np.finfo(float).eps * (1.0 + max(float(np.max(np.abs(a))), float(np.max(np.abs(b)))))


def _norm(a, axes):
    return np.sqrt(np.sum(a * a, axis=axes)) if axes else np.abs(a)


def _path_data(sol: FBSDESolution, c: int):
    rep = sol.k_report
    X = sol.forward[c].states
    return X, rep.Y[c], rep.Z[c], np.diff(rep.K[c], axis=1)


def linearize(sol1: FBSDESolution, sol2: FBSDESolution, index: int) -> LinearizedCoefficients:
    """Telescoping difference quotients a1..a8 along ensemble ``index``.

    Coordinate k of x is switched from X1 to X2 one at a time; a quotient is
    zero where its denominator is at roundoff level.
    """
    c1, c2 = sol1.coeffs, sol2.coeffs
    setting = sol2.setting
    ens = sol2.ensembles[index]
    e1 = sol1.ensembles[index]
    if not (np.array_equal(ens.increments, e1.increments) and np.array_equal(ens.qv, e1.qv)):
        raise InvalidProblem("both solutions must be evaluated on the same ensemble")
    X1, Y1, Z1, dK1 = _path_data(sol1, index)
    X2, Y2, Z2, dK2 = _path_data(sol2, index)
    P, N1, n = X1.shape
    N = N1 - 1
    dt = ens.dt
    gamma = ens.control.array
    Xh, Yh, Zh = X1 - X2, Y1 - Y2, Z1 - Z2
    fx, fy, fz = _floor(X1, X2), _floor(Y1, Y2), _floor(Z1, Z2)
    a1 = np.zeros((P, N, n, n))
    a3 = np.zeros((P, N, n, n))
    a5 = np.zeros((P, N, n))
    a2 = np.zeros((P, N, n))
    a4 = np.zeros((P, N, n))
    a6 = np.zeros((P, N))
    a7 = np.zeros((P, N))
    for i in range(N):
        t = i * dt
        g = gamma[i]
        x1, x2 = X1[:, i, :], X2[:, i, :]
        y1, y2, z1, z2 = Y1[:, i], Y2[:, i], Z1[:, i], Z2[:, i]
        prev = x1.copy()
        for k in range(n):
            cur = prev.copy()
            cur[:, k] = x2[:, k]
            den = Xh[:, i, k]
            db = c2.b(t, prev, y1) - c2.b(t, cur, y1) + g * (c2.h(t, prev, y1) - c2.h(t, cur, y1))
            ds = c2.sigma(t, prev, y1) - c2.sigma(t, cur, y1)
            dfx = c2.f(t, prev, y1, z1) - c2.f(t, cur, y1, z1) + g * (c2.g(t, prev, y1, z1) - c2.g(t, cur, y1, z1))
            a1[:, i, :, k] = _quot(db, den[:, None], fx)
            a3[:, i, :, k] = _quot(ds, den[:, None], fx)
            a5[:, i, k] = _quot(dfx, den, fx)
            prev = cur
        a2[:, i, :] = _quot(c2.b(t, x2, y1) - c2.b(t, x2, y2) + g * (c2.h(t, x2, y1) - c2.h(t, x2, y2)),
                            Yh[:, i, None], fy)
        a4[:, i, :] = _quot(c2.sigma(t, x2, y1) - c2.sigma(t, x2, y2), Yh[:, i, None], fy)
        a6[:, i] = _quot(c2.f(t, x2, y1, z1) - c2.f(t, x2, y2, z1) + g * (c2.g(t, x2, y1, z1) - c2.g(t, x2, y2, z1)),
                         Yh[:, i], fy)
        a7[:, i] = _quot(c2.f(t, x2, y2, z1) - c2.f(t, x2, y2, z2) + g * (c2.g(t, x2, y2, z1) - c2.g(t, x2, y2, z2)),
                         Zh[:, i], fz)
    # terminal: phi1 telescoped in x, plus the gap between the two terminal functions at X2
    a8 = np.zeros((P, n))
    prev = X1[:, N, :].copy()
    for k in range(n):
        cur = prev.copy()
        cur[:, k] = X2[:, N, k]
        a8[:, k] = _quot(c1.phi(prev) - c1.phi(cur), Xh[:, N, k], fx)
        prev = cur
    phi_gap = c1.phi(X2[:, N, :]) - c2.phi(X2[:, N, :])
    lin = LinearizedCoefficients(a1, a2, a3, a4, a5, a6, a7, a8, gamma, ens.increments, dt, Xh, Yh, Zh, X2,
                                 dK1, dK2, phi_gap)
    _check_bounds(lin, c1, c2, setting)
    lin.equation_residual = _equation_residual(lin, c1, c2, sol1, sol2, index)
    return lin


def _check_bounds(lin, c1, c2, setting):
    n = lin.a1.shape[-1]
    hi2 = setting.sigma_high ** 2
    L1 = max(c1.L1, c2.L1)
    L2 = max(c1.L2, c2.L2)
    L3 = max(c1.L3, c2.L3)
    top = max(1.0, hi2)
    checks = {
        "a1": (_norm(lin.a1, (2, 3)), n * L1 * (1 + hi2)),
        "a2": (_norm(lin.a2, (2,)), n * L2 * (1 + hi2)),
        "a3": (_norm(lin.a3, (2, 3)), n * L1),
        "a4": (_norm(lin.a4, (2,)), n * L2),
        "a5": (_norm(lin.a5, (2,)), L3 * (1 + hi2)),
        # each of the y- and z-quotients is bounded on its own by L1 max(1, hi^2)
        "a6": (np.abs(lin.a6), L1 * top),
        "a7": (np.abs(lin.a7), L1 * top),
        "a8": (_norm(lin.a8, (1,)), L3),
    }
    for name, (vals, bound) in checks.items():
        m = float(np.max(vals)) if vals.size else 0.0
        ok = m <= bound * (1 + BOUND_SLACK) + BOUND_SLACK
        lin.bounds[name] = {"max": m, "bound": bound, "ok": bool(ok)}
        if not ok:
            lin.defects.append(f"{name}: max {m:.6g} exceeds {bound:.6g}")
    s = float(np.max(np.abs(lin.a6) + np.abs(lin.a7))) if lin.a6.size else 0.0
    sb = L1 * (1 + hi2)
    lin.sum_bound_flag = s > sb * (1 + BOUND_SLACK) + BOUND_SLACK
    lin.bounds["a6+a7"] = {"max": s, "bound": sb, "ok": not lin.sum_bound_flag, "hard": False}


def _equation_residual(lin, c1, c2, sol1, sol2, index):
    """Largest one-step mismatch of the linear equations for (X^, Y^) along the paths."""
    Xh, Yh, Zh = lin.Xh, lin.Yh, lin.Zh
    N = lin.a6.shape[1]
    dt = lin.dt
    dX = np.diff(Xh, axis=1)
    predX = (np.einsum("pijk,pik->pij", lin.a1, Xh[:, :N]) + lin.a2 * Yh[:, :N, None]) * dt \
        + (np.einsum("pijk,pik->pij", lin.a3, Xh[:, :N]) + lin.a4 * Yh[:, :N, None]) * lin.dB[:, :, None]
    # the Y-equation residual also carries the dependence of f, g on the coefficient set (zero here)
    dY = np.diff(Yh, axis=1)
    predY = (np.einsum("pij,pij->pi", lin.a5, Xh[:, :N]) + lin.a6 * Yh[:, :N] + lin.a7 * Zh[:, :N]) * dt \
        + Zh[:, :N] * lin.dB + lin.dK1 - lin.dK2
    ex = float(np.max(np.abs(dX - predX))) if dX.size else 0.0
    ey = float(np.max(np.abs(dY - predY))) if dY.size else 0.0
    return max(ex, ey)


@dataclass
class DualSolution:
    l: np.ndarray  # (P, N+1)
    p: np.ndarray  # (P, N+1, n)
    q: np.ndarray  # (P, N, n)
    p0: np.ndarray  # (n,)
    iterations: int
    converged: bool
    regression_rms: float
    terminal_error: float
    duality_residual: float = math.nan

    @property
    def l_min(self) -> float:
        return float(np.min(self.l))


def _design(u, degree):
    center = u.mean(axis=0)
    spread = u.std(axis=0)
    active = spread > 1e-12 * (1 + np.abs(center))
    if not active.any():
        return np.ones((u.shape[0], 1))
    return poly_features((u[:, active] - center[active]) / spread[active], degree)


def _scaled_fit(A, l, target):
    """Least squares of target on columns l * A; returns fitted values and rms misfit."""
    W = A * l[:, None]
    coef, *_ = np.linalg.lstsq(W, target, rcond=None)
    fit = W @ coef
    return fit, float(np.sqrt(np.mean((target - fit) ** 2, axis=0)).max())


def solve_dual(lin: LinearizedCoefficients, setting: Optional[GSetting] = None, tol: float = 1e-8,
               max_iter: int = 30, degree: int = 3) -> DualSolution:
    """Classical Picard for the dual linear system under the single control gamma.

    Forward: Euler for l. Backward: least squares for (p, q) on l * psi(X2, X^)
    with psi the monomials of degree <= ``degree``. Stops when the root-mean-square
    change of (l, p) over paths is at most ``tol``.
    """
    gamma = lin.gamma
    if setting is not None:
        lo, hi = setting.sigma_low ** 2, setting.sigma_high ** 2
        if np.any(gamma < lo * (1 - 1e-12)) or np.any(gamma > hi * (1 + 1e-12)):
            raise InvalidProblem("reference control leaves the volatility band")
    P, N = lin.a6.shape
    n = lin.a8.shape[1]
    dt, dB = lin.dt, lin.dB
    designs = [_design(np.concatenate([lin.X2[:, i, :], lin.Xh[:, i, :]], axis=1), degree) for i in range(N + 1)]
    p = np.zeros((P, N + 1, n))
    q = np.zeros((P, N, n))
    l = np.ones((P, N + 1))
    rms = 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        l_new = np.empty((P, N + 1))
        l_new[:, 0] = 1.0
        for i in range(N):
            drift = -lin.a6[:, i] * l_new[:, i] + np.sum(lin.a2[:, i] * p[:, i], axis=1) \
                + gamma[i] * np.sum(lin.a4[:, i] * q[:, i], axis=1)
            l_new[:, i + 1] = l_new[:, i] + drift * dt - lin.a7[:, i] / gamma[i] * l_new[:, i] * dB[:, i]
        p_new = np.empty((P, N + 1, n))
        q_new = np.empty((P, N, n))
        p_new[:, N] = l_new[:, N, None] * lin.a8
        rms = 0.0
        for i in range(N - 1, -1, -1):
            A = designs[i]
            li = l_new[:, i]
            qt, r1 = _scaled_fit(A, li, p_new[:, i + 1] * dB[:, i, None] / (gamma[i] * dt))
            drv = li[:, None] * lin.a5[:, i] - np.einsum("pjk,pk->pj", lin.a1[:, i], p_new[:, i + 1]) \
                - gamma[i] * np.einsum("pjk,pk->pj", lin.a3[:, i], qt)
            pt, r2 = _scaled_fit(A, li, p_new[:, i + 1] - drv * dt)
            q_new[:, i] = qt
            p_new[:, i] = pt
            rms = max(rms, r2)
        # mean-square change: the worst single path sits on a least-squares roundoff floor near 1e-8
        change = max(float(np.sqrt(np.mean((l_new - l) ** 2))), float(np.sqrt(np.mean((p_new - p) ** 2))))
        log.debug("dual iteration %d change %.3e", it, change)
        l, p, q = l_new, p_new, q_new
        if change <= tol:
            converged = True
            break
    if not converged:
        log.warning("dual Picard stopped after %d iterations without reaching tol=%.3g", max_iter, tol)
    term = float(np.max(np.abs(p[:, N] - l[:, N, None] * lin.a8)))
    return DualSolution(l, p, q, p[:, 0].mean(axis=0), it, converged, rms, term)


@dataclass
class DualityReport:
    lhs: float  # Y1_0 - Y2_0
    rhs: float  # p0 x^0 + E[l_T phi^ - int l dK1]
    residual: float
    stderr: float
    k2_term: float  # E[int l dK2], zero under the exact reference measure
    budget: float
    passed: bool
    defect: float  # |lhs - rhs - E int l dK2|: the identity with the reference-measure gap removed

    def to_dict(self):
        return dict(self.__dict__)


def duality_check(sol1: FBSDESolution, sol2: FBSDESolution, dual: DualSolution, lin: LinearizedCoefficients,
                  ref: Optional[ReferenceMeasure] = None) -> DualityReport:
    """Residual R = |Y^_0 - p0 x^_0 - E[l_T phi^(X2_T) - int l dK1]| with its error budget.

    Budget = 5 SE + |E int l dK2| + |E K2_T| + dt (1 + |Y1_0| + |Y2_0|): sampling
    error, the two faces of the reference-measure gap (K2 does not vanish
    under a family control), and the grid tolerance.
    """
    l = dual.l
    N = lin.a6.shape[1]
    lhs = sol1.y0 - sol2.y0
    p0x0 = float(np.dot(dual.p0, lin.Xh[0, 0]))
    lK1 = np.sum(l[:, :N] * lin.dK1, axis=1)
    lK2 = np.sum(l[:, :N] * lin.dK2, axis=1)
    raw = l[:, N] * lin.phi_gap - lK1
    P = len(raw)
    rhs = p0x0 + float(np.mean(raw))
    se = float(np.std(raw, ddof=1) / math.sqrt(P)) if P > 1 else 0.0
    k2 = float(np.mean(lK2))
    residual = abs(lhs - rhs)
    grid_tol = sol2.grid.dt * (1 + abs(sol1.y0) + abs(sol2.y0))
    kres = abs(ref.residual) if ref is not None else 0.0
    budget = 5 * se + abs(k2) + kres + grid_tol
    dual.duality_residual = residual
    return DualityReport(lhs, rhs, residual, se, k2, budget, residual <= budget, abs(lhs - rhs - k2))


@dataclass
class ComparisonResult:
    theorem: str
    seed: int
    n_steps: int
    y0_1: float
    y0_2: float
    margin: float
    eps_num: float
    l_min: float
    tol_pos: float
    duality_residual: float
    budget: float
    verdict: str  # PASS, FAIL or SKIPPED
    reasons: list = field(default_factory=list)
    p0: float = math.nan
    gap_bound: float = math.nan  # Y^_0 - p0 (x1 - x2)
    reference: Optional[dict] = None
    bounds: Optional[dict] = None
    sum_bound_flag: bool = False
    hypothesis: Optional[dict] = None

    def row(self) -> dict:
        return {k: getattr(self, k) for k in BATTERY_FIELDS}

    def to_dict(self):
        d = dict(self.__dict__)
        return d


BATTERY_FIELDS = ("theorem", "seed", "n_steps", "y0_1", "y0_2", "margin", "eps_num", "l_min", "tol_pos",
                  "duality_residual", "budget", "p0", "verdict")


def _unpack(problem):
    if isinstance(problem, ProblemCatalogEntry):
        return problem.setting, problem.coefficients
    return problem


def _solve_pair(s1, c1, s2, c2, n_steps, family, seed, n_paths, tol, threads, model):
    from .model import DiscretizationGrid

    if family is None:
        family = ControlFamily.bang_bang(s2, n_steps)
    center = 0.5 * (s1.x0_array + s2.x0_array)
    half = 0.5 * float(np.max(np.abs(s1.x0_array - s2.x0_array)))
    grid = DiscretizationGrid.build(s2, n_steps, center=center,
                                    width=6.0 + half / (s2.sigma_high * math.sqrt(s2.T)))
    kw = dict(tol=tol, seed=seed, n_paths=n_paths, threads=threads, model=model)
    sol1 = picard_solve(s1, c1, grid, family, **kw)
    sol2 = picard_solve(s2, c2, grid, family, **kw)
    # grid error of each Y0 estimated from a half-resolution solve (first-order scheme)
    grid_err = 0.0
    if n_steps >= 4:
        half_n = n_steps // 2
        g2 = DiscretizationGrid.build(s2, half_n, center=center,
                                      width=6.0 + half / (s2.sigma_high * math.sqrt(s2.T)))
        fam2 = ControlFamily.bang_bang(s2, half_n)
        ckw = dict(kw, n_paths=min(n_paths, 200), with_k=False)
        for s, c, sol in ((s1, c1, sol1), (s2, c2, sol2)):
            grid_err = max(grid_err, abs(picard_solve(s, c, g2, fam2, **ckw).y0 - sol.y0))
    else:
        grid_err = sol2.grid.dt * (1 + abs(sol1.y0) + abs(sol2.y0))
    return sol1, sol2, grid_err


def _dual_stage(res: ComparisonResult, sol1, sol2, setting, dual_degree):
    ref = find_reference_measure(sol2)
    lin = linearize(sol1, sol2, ref.index)
    dual = solve_dual(lin, setting, degree=dual_degree)
    rep = duality_check(sol1, sol2, dual, lin, ref)
    res.reference = ref.to_dict()
    res.bounds = lin.bounds
    res.sum_bound_flag = lin.sum_bound_flag
    res.l_min = dual.l_min
    res.tol_pos = 1e-6 * max(1.0, float(np.max(np.abs(dual.l))))
    res.duality_residual = rep.residual
    res.budget = rep.budget
    res.p0 = float(dual.p0[0])
    if lin.defects:
        res.reasons += ["coefficient-ratio bound: " + d for d in lin.defects]
    if not dual.converged:
        res.reasons.append("dual Picard did not converge")
    if res.l_min < -res.tol_pos:
        res.reasons.append(f"l_min {res.l_min:.3g} below -{res.tol_pos:.1g}")
    if not rep.passed:
        res.reasons.append(f"duality residual {rep.residual:.3g} above budget {rep.budget:.3g}")
    return lin, dual, rep


def _eps_num(grid_err, se, tol):
    """5 (MC SE + grid error + Picard tolerance)."""
    return 5 * (se + grid_err + tol)


def compare_thm41(problem1, problem2, n_steps: int = 40, family: Optional[ControlFamily] = None, seed: int = 0,
                  n_paths: int = 2000, tol: float = 1e-6, threads: int = 1, model: str = "two-point",
                  dual_degree: int = 3) -> ComparisonResult:
    """Ordering of Y_0 for two problems that differ only in the terminal function."""
    s1, c1 = _unpack(problem1)
    s2, c2 = _unpack(problem2)
    if s1.x0 != s2.x0 or (s1.sigma_low, s1.sigma_high, s1.T, s1.p) != (s2.sigma_low, s2.sigma_high, s2.T, s2.p):
        raise InvalidProblem("terminal-ordering pair must share the setting and the initial state")
    if s2.p != 2:
        raise InvalidProblem("comparison experiments are for p = 2 only")
    sol1, sol2, grid_err = _solve_pair(s1, c1, s2, c2, n_steps, family, seed, n_paths, tol, threads, model)
    res = ComparisonResult("41", seed, n_steps, sol1.y0, sol2.y0, sol1.y0 - sol2.y0, math.nan, math.nan, math.nan,
                           math.nan, math.nan, "SKIPPED")
    hyp = {}
    for tag, sol in (("along_X2", sol2), ("along_X1", sol1)):
        gaps = [c1.phi(f.states[:, -1, :]) - c2.phi(f.states[:, -1, :]) for f in sol.forward]
        hyp[tag] = float(min(np.min(g) for g in gaps))
    res.hypothesis = hyp
    if max(hyp.values()) < -1e-12:
        res.reasons.append("terminal ordering fails along both X1 and X2 paths")
        return res
    lin, dual, rep = _dual_stage(res, sol1, sol2, s2, dual_degree)
    res.eps_num = _eps_num(grid_err, rep.stderr, tol)
    ordering = res.margin >= -res.eps_num
    if not ordering:
        res.reasons.insert(0, f"Y1_0 - Y2_0 = {res.margin:.3g} below -eps_num = {-res.eps_num:.3g}")
    res.verdict = "PASS" if not res.reasons else "FAIL"
    return res


def _monotone_hypotheses(setting: GSetting, coeffs: CoefficientSet, samples: int = 4000, seed: int = 0) -> dict:
    """Sampled checks: phi non-decreasing, f and g non-increasing in x."""
    rng = np.random.default_rng(seed)
    lo, hi = setting.working_box()
    x = lo + (hi - lo) * rng.random((samples, 1))
    dx = (hi - lo) * rng.random((samples, 1)) * rng.choice([1e-3, 1.0], size=(samples, 1))
    x2 = x + dx
    y = 4 * rng.standard_normal(samples)
    z = 4 * rng.standard_normal(samples)
    t = setting.T * rng.random(samples)
    out = {
        "phi_nondecreasing": float(np.min(coeffs.phi(x2) - coeffs.phi(x))),
        "f_nonincreasing": float(np.min(coeffs.f(t, x, y, z) - coeffs.f(t, x2, y, z))),
        "g_nonincreasing": float(np.min(coeffs.g(t, x, y, z) - coeffs.g(t, x2, y, z))),
    }
    return out


def compare_thm42(problem1, problem2, n_steps: int = 40, family: Optional[ControlFamily] = None, seed: int = 0,
                  n_paths: int = 2000, tol: float = 1e-6, threads: int = 1, model: str = "two-point",
                  dual_degree: int = 3) -> ComparisonResult:
    """Ordering of Y_0 for one monotone problem started from x1 >= x2 (n = 1)."""
    s1, c1 = _unpack(problem1)
    s2, c2 = _unpack(problem2)
    if s1.n != 1 or s2.n != 1:
        raise InvalidProblem("initial-state-ordering experiments need n = 1")
    if (s1.sigma_low, s1.sigma_high, s1.T, s1.p) != (s2.sigma_low, s2.sigma_high, s2.T, s2.p):
        raise InvalidProblem("initial-state-ordering pair must share the setting apart from x0")
    if s2.p != 2:
        raise InvalidProblem("comparison experiments are for p = 2 only")
    res = ComparisonResult("42", seed, n_steps, math.nan, math.nan, math.nan, math.nan, math.nan, math.nan,
                           math.nan, math.nan, "SKIPPED")
    if c1.source and c2.source and c1.source != c2.source:
        res.reasons.append("initial-state-ordering pair must share the coefficients")
        return res
    hyp = _monotone_hypotheses(s2, c2, seed=seed)
    hyp["x1_minus_x2"] = float(s1.x0[0] - s2.x0[0])
    res.hypothesis = hyp
    bad = [k for k, v in hyp.items() if v < -1e-12]
    if bad:
        res.reasons.append("hypothesis fails: " + ", ".join(bad))
        return res
    sol1, sol2, grid_err = _solve_pair(s1, c1, s2, c2, n_steps, family, seed, n_paths, tol, threads, model)
    res.y0_1, res.y0_2, res.margin = sol1.y0, sol2.y0, sol1.y0 - sol2.y0
    lin, dual, rep = _dual_stage(res, sol1, sol2, s2, dual_degree)
    res.eps_num = _eps_num(grid_err, rep.stderr, tol)
    a8_min = float(np.min(lin.a8))
    a5_max = float(np.max(lin.a5)) if lin.a5.size else 0.0
    if a8_min < -BOUND_SLACK:
        res.reasons.append(f"a8 negative ({a8_min:.3g})")
    if a5_max > BOUND_SLACK:
        res.reasons.append(f"a5 positive ({a5_max:.3g})")
    res.gap_bound = res.margin - res.p0 * hyp["x1_minus_x2"]
    if res.gap_bound < -rep.budget - res.eps_num:
        res.reasons.append(f"Y^_0 - p0 (x1 - x2) = {res.gap_bound:.3g} below the budget")
    if res.p0 < -rep.budget:
        res.reasons.append(f"p0 = {res.p0:.3g} below -budget")
    if res.margin < -res.eps_num:
        res.reasons.insert(0, f"Y1_0 - Y2_0 = {res.margin:.3g} below -eps_num = {-res.eps_num:.3g}")
    res.verdict = "PASS" if not res.reasons else "FAIL"
    return res


_BASE = dict(h="0.02*cos(x1)", sigma="1 + 0.03*sin(x1)")


def random_pair(theorem: str, seed: int):
    """Randomised certified pair for the comparison battery.

    Both members share b = -0.05 x + kb tanh(y), h, sigma and a driver that is
    non-increasing in x; phi2 = alpha log(1 + exp(2 x)). For the terminal-
    ordering case (41) phi1 = phi2 + c0 + c1 (1 + tanh x); for the initial-state-
    ordering case (42) the pair differs in x0.
    """
    rng = np.random.default_rng([41 if theorem == "41" else 42, seed])
    kb = rng.uniform(0.01, 0.05)
    alpha = rng.uniform(0.02, 0.05)
    kx = rng.uniform(0.0, 0.03)
    gx = rng.uniform(0.0, 0.02)
    T = 0.5
    coef = dict(
        b=f"-0.05*x1 + {kb:.6f}*tanh(y)",
        f=f"-0.05*y + 0.03*tanh(z) - {kx:.6f}*tanh(x1)",
        g=f"0.02*z - {gx:.6f}*tanh(x1)",
        phi=f"{alpha:.6f}*log(1 + exp(2*x1))",
        L1=0.1, L2=round(kb, 6) + 1e-6, **_BASE,
    )
    L3_driver = kx + gx
    if theorem == "41":
        x0 = rng.uniform(-0.5, 0.5)
        c0 = rng.uniform(0.0, 0.3)
        c1 = rng.uniform(0.0, 0.02)
        s = GSetting(sigma_low=0.5, sigma_high=1.0, p=2.0, beta=3.0, n=1, T=T, x0=(x0,))
        lo = CoefficientSet.from_strings(1, **dict(coef, L3=max(2 * alpha, L3_driver) + 1e-6))
        hi_phi = coef["phi"] + f" + {c0:.6f} + {c1:.6f}*(1 + tanh(x1))"
        up = CoefficientSet.from_strings(1, **dict(coef, phi=hi_phi, L3=max(2 * alpha + c1, L3_driver) + 1e-6))
        return (s, up), (s, lo)
    mid = rng.uniform(-0.5, 0.5)
    gap = rng.uniform(0.05, 1.0)
    c = CoefficientSet.from_strings(1, **dict(coef, L3=max(2 * alpha, L3_driver) + 1e-6))
    s1 = GSetting(sigma_low=0.5, sigma_high=1.0, p=2.0, beta=3.0, n=1, T=T, x0=(mid + gap / 2,))
    s2 = GSetting(sigma_low=0.5, sigma_high=1.0, p=2.0, beta=3.0, n=1, T=T, x0=(mid - gap / 2,))
    return (s1, c), (s2, c)


def run_battery(theorem: str, seeds: Sequence[int] = range(20), grids: Sequence[int] = (20, 40, 80),
                n_paths: int = 2000, threads: int = 1, pair_fn=None, **kw) -> list:
    """All (seed, grid) experiments; the result order never depends on ``threads``."""
    if theorem not in ("41", "42"):
        raise InvalidProblem("theorem must be 41 (terminal ordering) or 42 (initial-state ordering)")
    fn = compare_thm41 if theorem == "41" else compare_thm42
    pair_fn = pair_fn or random_pair
    jobs = [(s, N) for s in seeds for N in grids]

    def one(job):
        s, N = job
        p1, p2 = pair_fn(theorem, s)
        for st, cf in (p1, p2):
            if certify(st, cf).verdict == NOT_CERTIFIED:
                raise NotCertified(f"battery pair for seed {s} is not certified")
        return fn(p1, p2, n_steps=N, seed=s, n_paths=n_paths, **kw)

    return parallel_map(one, jobs, threads)
