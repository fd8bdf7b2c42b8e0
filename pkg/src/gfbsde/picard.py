"""Coupled forward-backward solver by Picard iteration.

Stage m takes the previous iterate, solves the backward equation with the
forward state frozen, then re-solves the forward equation with the new Y.
Two backends:

``lattice`` (default)
    The previous stage is frozen as a y-policy u(m-1)(t, x). The backward
    equation is solved by dynamic programming against the Markov forward flow
    that this policy induces, giving u(m); the forward equation is then run
    with Y_t = u(m)(t, X_t). The fixed point is the same as for the path-level
    iteration, but each stage reads the policy instead of the frozen
    X(m-1) paths. Every report carries this note.

``paths``
    The frozen X(m-1) paths enter f, g and phi directly. Conditional
    expectations come from a one-step branching of each path point followed
    by least squares on polynomials of degree <= 3 in the state. Meant as a
    cross-check on small instances.

Distances d_m = sup over the family of E[sup_t |X(m) - X(m-1)|^p'] are taken
on fixed ensembles (one seed shared by every control and every stage).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bsde import (BackwardSolution, KReport, dp_backward, flow_from_policy, k_extract,
                   problem_from_coeffs)
from .constants import (EXISTS_UNIQUE_P_GE2, EXISTS_UNIQUE_P_LT2, NOT_CERTIFIED, CertificateReport,
                        certify, lambda_p, lambda_tilde_p)
from .gprocess import (ControlFamily, LatticeFunction, parallel_map, per_control_stats,
                       quadrature_rule, sample_paths)
from .model import CoefficientSet, DiscretizationGrid, GSetting, InvalidProblem, ProblemCatalogEntry
from .regression import PolyFit, fit_poly
from .sde import Feedback, ForwardSolution, NumericalAbort, euler_forward

__all__ = [
    "NotCertified",
    "TraceRow",
    "ContractionTrace",
    "FBSDESolution",
    "PathBackward",
    "ContractionTable",
    "StabilityReport",
    "picard_solve",
    "picard_solve_p_lt2",
    "contraction_report",
    "perturbation_experiment",
    "LATTICE_NOTE",
]

log = logging.getLogger(__name__)

LATTICE_NOTE = ("value-function Picard: stage m solves the backward equation against the forward flow "
                "driven by the previous y-policy rather than the frozen previous forward paths; same fixed point")
PATHS_NOTE = ("path-level Picard: frozen previous forward paths in f, g and phi; conditional expectations "
              "by one-step branching and degree-3 least squares in the current state")


class NotCertified(InvalidProblem):
    """The weak-coupling certificate failed and ``force`` was not given."""


@dataclass
class TraceRow:
    m: int
    d_x: float
    d_x_se: float
    d_y: float
    d_y_se: float
    ratio: float
    envelope: float
    y0: float

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class ContractionTrace:
    rows: list
    p_prime: float
    lambda_p_prime: float
    tol: float
    converged: bool = False
    backend: str = "lattice"
    budget_extra: list = field(default_factory=list)  # per-row additive error (paths backend)

    def __len__(self):
        return len(self.rows)

    @property
    def d(self) -> np.ndarray:
        return np.array([r.d_x for r in self.rows])

    @property
    def d_y(self) -> np.ndarray:
        return np.array([r.d_y for r in self.rows])

    @property
    def ratios(self) -> np.ndarray:
        return np.array([r.ratio for r in self.rows])

    def to_dict(self):
        return {"p_prime": self.p_prime, "lambda_p_prime": self.lambda_p_prime, "tol": self.tol,
                "converged": self.converged, "iterations": len(self.rows), "backend": self.backend,
                "rows": [r.to_dict() for r in self.rows]}


@dataclass
class PathBackward:
    """Backward iterate of the path backend: polynomial fits per time step."""

    y_fits: list
    z_fits: list
    residuals: np.ndarray  # rms misfit per step
    x0: np.ndarray

    def y0(self, x0=None) -> float:
        x = self.x0 if x0 is None else np.asarray(x0, float)
        return float(self.y_fits[0](np.atleast_2d(x))[0])

    def z_fn(self, i, x):
        return self.z_fits[min(i, len(self.z_fits) - 1)](x)

    def y_fn(self, i, x):
        return self.y_fits[min(i, len(self.y_fits) - 1)](x)

    @property
    def budget(self) -> float:
        return float(np.sum(self.residuals))


@dataclass
class FBSDESolution:
    setting: GSetting
    coeffs: CoefficientSet = field(repr=False)
    grid: DiscretizationGrid = field(repr=False)
    family: ControlFamily = field(repr=False)
    forward: list = field(repr=False)  # ForwardSolution per control
    backward: object = field(repr=False)  # BackwardSolution or PathBackward
    y0: float = 0.0
    trace: Optional[ContractionTrace] = None
    certificate: Optional[CertificateReport] = None
    k_report: Optional[KReport] = None
    terminal_gap: float = 0.0
    backend: str = "lattice"
    note: str = LATTICE_NOTE
    status: str = "CONVERGED"
    ensembles: list = field(default_factory=list, repr=False)
    forced: bool = False

    @property
    def x_solution(self) -> list:
        return self.forward

    @property
    def certified(self) -> str:
        return self.certificate.verdict if self.certificate is not None else NOT_CERTIFIED

    @property
    def converged(self) -> bool:
        return self.status == "CONVERGED"

    def z_along(self, c: int) -> np.ndarray:
        """Z read along the forward paths of control c, shape (n_paths, N+1)."""
        X = self.forward[c].states
        N = X.shape[1] - 1
        Z = np.empty(X.shape[:2])
        for i in range(N):
            Z[:, i] = self.backward.z_fn(i, X[:, i, :])
        Z[:, N] = Z[:, N - 1]
        return Z

    def grid_tolerance(self) -> float:
        return self.grid.dt * (1.0 + abs(self.y0))

    def summary(self) -> dict:
        out = {"y0": self.y0, "status": self.status, "backend": self.backend, "note": self.note,
               "certificate": self.certified, "forced": self.forced, "terminal_gap": self.terminal_gap,
               "grid_tolerance": self.grid_tolerance(), "trace": self.trace.to_dict() if self.trace else None}
        if self.k_report is not None:
            out["k_diagnostics"] = self.k_report.to_dict()
        if isinstance(self.backward, PathBackward):
            out["regression_budget"] = self.backward.budget
        return out


def _distance(new: list, old: list, p: float, family) -> tuple:
    """sup over controls of E[sup_t |new - old|^p]; arrays (P, N+1[, n])."""
    samples = []
    for a, b in zip(new, old):
        d = np.abs(a - b) if a.ndim == 2 else np.linalg.norm(a - b, axis=2)
        samples.append(np.max(d, axis=1) ** p)
    r = per_control_stats(samples, family)
    return r.value, r.stderr


def _ratio(cur: float, prev: float) -> float:
    if prev > 0:
        return cur / prev
    return 0.0 if cur == 0 else math.inf


def _certificate(setting, coeffs, cp, force):
    cert = certify(setting, coeffs, cp)
    if cert.verdict == NOT_CERTIFIED:
        if not force:
            raise NotCertified("weak-coupling certificate failed: " + "; ".join(cert.reasons))
        log.warning("solving an uncertified problem (--force): %s", "; ".join(cert.reasons))
    return cert


def _as_policy(init_policy):
    if init_policy is None or isinstance(init_policy, (LatticeFunction, Feedback)):
        return init_policy
    if callable(init_policy):
        return Feedback(init_policy, "initial")
    val = float(init_policy)
    return Feedback(lambda i, x: np.full(x.shape[0], val), "initial")


def _policy_on_constant(policy, x0, N, P):
    x = np.broadcast_to(np.asarray(x0, float), (P, len(x0)))
    out = np.zeros((P, N + 1))
    if policy is None:
        return out
    for i in range(N + 1):
        out[:, i] = policy(i, x)
    return out


def picard_solve(setting: GSetting, coeffs: CoefficientSet, grid: Optional[DiscretizationGrid] = None,
                 family: Optional[ControlFamily] = None, tol: float = 1e-4, max_iter: int = 50, seed: int = 0,
                 n_paths: int = 2000, *, p_prime: Optional[float] = None, backend: str = "lattice",
                 init_policy=None, force: bool = False, cp=None, model: str = "two-point", threads: int = 1,
                 degree: int = 3, n_steps: int = 50, with_k: bool = True) -> FBSDESolution:
    """Picard iteration for the coupled system; see the module docstring.

    Stops when max(d_x, d_y)^(1/p') <= tol or after ``max_iter`` stages. A
    run that hits ``max_iter`` returns status NOT_CONVERGED and logs a warning.
    """
    if backend not in ("lattice", "paths"):
        raise InvalidProblem(f"unknown backend '{backend}' (use lattice or paths)")
    if tol <= 0 or max_iter < 1:
        raise InvalidProblem("tol must be > 0 and max_iter >= 1")
    cert = _certificate(setting, coeffs, cp, force)
    if grid is None:
        grid = DiscretizationGrid.build(setting, n_steps)
    if family is None:
        family = ControlFamily.bang_bang(setting, grid.n_steps)
    pp = p_prime if p_prime is not None else (cert.constants.p_prime or setting.p)
    lam_fn = lambda_tilde_p if setting.p < 2 else lambda_p
    lam = lam_fn(pp, setting.T, setting.n, coeffs.L1, coeffs.L2, coeffs.L3, setting.sigma_high,
                 setting.sigma_low, cp)
    ensembles = parallel_map(lambda c: sample_paths(grid, c, n_paths, seed, setting, model), family, threads)
    N = grid.n_steps
    x0 = setting.x0_array
    policy = _as_policy(init_policy)

    # stage 0: X = x0, Y = u(0) read at x0
    prev_X = [np.broadcast_to(x0, (n_paths, N + 1, setting.n)).copy() for _ in ensembles]
    prev_Y = [_policy_on_constant(policy, x0, N, n_paths) for _ in ensembles]
    trace = ContractionTrace([], pp, lam, tol, backend=backend)
    sol = None
    fwd = None
    d1 = None
    status = "NOT_CONVERGED"
    for m in range(1, max_iter + 1):
        if backend == "lattice":
            sol = dp_backward(problem_from_coeffs(coeffs, flow_from_policy(coeffs, grid, policy)), grid, setting)
            fwd = parallel_map(lambda e: euler_forward(coeffs, grid, e, setting.x0, sol.y_fn), ensembles, threads)
            new_X = [f.states for f in fwd]
            new_Y = [f.y for f in fwd]
            y0 = sol.y0(x0)
            policy = sol.y_fn
            extra = 0.0
        else:
            sol, new_Y = _paths_stage(coeffs, setting, grid, prev_X, prev_Y, m == 1, degree)
            fwd = parallel_map(lambda a: euler_forward(coeffs, grid, a[0], setting.x0, a[1]),
                               list(zip(ensembles, new_Y)), threads)
            new_X = [f.states for f in fwd]
            y0 = sol.y0(x0)
            extra = sol.budget
        dx, dx_se = _distance(new_X, prev_X, pp, family)
        dy, dy_se = _distance(new_Y, prev_Y, pp, family)
        if d1 is None:
            d1 = dx
        prev_d = trace.rows[-1].d_x if trace.rows else None
        row = TraceRow(m, dx, dx_se, dy, dy_se, math.nan if prev_d is None else _ratio(dx, prev_d),
                       lam ** (m - 1) * d1, y0)
        trace.rows.append(row)
        trace.budget_extra.append(extra)
        prev_X, prev_Y = new_X, new_Y
        if not (np.isfinite(dx) and np.isfinite(dy)):
            raise NumericalAbort("non-finite Picard distance", step=m)
        if m >= 2 and max(dx, dy) ** (1.0 / pp) <= tol:
            status = "CONVERGED"
            break
    trace.converged = status == "CONVERGED"
    if not trace.converged:
        log.warning("Picard reached max_iter=%d with d=%.3g > tol=%.3g", max_iter,
                    max(trace.rows[-1].d_x, trace.rows[-1].d_y) ** (1.0 / pp), tol)
    k_rep = None
    if backend == "lattice" and with_k:
        k_rep = k_extract(sol, ensembles, [f.states for f in fwd], family)
    gap = 0.0
    for f in fwd:
        XT = f.states[:, -1, :]
        gap = max(gap, float(np.max(np.abs(f.y[:, -1] - coeffs.phi(XT)))))
    return FBSDESolution(setting, coeffs, grid, family, fwd, sol, float(trace.rows[-1].y0), trace, cert, k_rep,
                         gap, backend, LATTICE_NOTE if backend == "lattice" else PATHS_NOTE, status, ensembles,
                         cert.verdict == NOT_CERTIFIED)


def _paths_stage(coeffs, setting, grid, prev_X, prev_Y, first, degree):
    """Backward regression along the frozen previous forward paths."""
    N, dt = grid.n_steps, grid.dt
    sq = math.sqrt(dt)
    qn, qw = quadrature_rule(grid.quadrature)
    vols = [setting.sigma_low, setting.sigma_high] if setting.sigma_low < setting.sigma_high else [setting.sigma_high]
    Xc = np.concatenate(prev_X, axis=0)
    Yc = np.concatenate(prev_Y, axis=0)
    y_fits: list = [None] * N
    z_fits: list = [None] * N
    resid = np.zeros(N)

    def nxt(i1, x):
        return coeffs.phi(x) if i1 == N else y_fits[i1](x)

    for i in range(N - 1, -1, -1):
        t = i * dt
        x = Xc[:, i, :]
        y = Yc[:, i]
        if first:
            drift = qv = dif = np.zeros_like(x)
        else:
            drift, qv, dif = coeffs.b(t, x, y), coeffs.h(t, x, y), coeffs.sigma(t, x, y)
        best_y = best_z = None
        for s in vols:
            base = x + drift * dt + qv * (s * s * dt)
            E = np.zeros(len(x))
            Zs = np.zeros(len(x))
            for xk, wk in zip(qn, qw):
                v = nxt(i + 1, base + dif * (s * sq * xk))
                E += wk * v
                Zs += wk * xk * v
            Zs /= s * sq
            ys = E - coeffs.f(t, x, E, Zs) * dt - coeffs.g(t, x, E, Zs) * (s * s * dt)
            if best_y is None:
                best_y, best_z = ys, Zs
            else:
                take = ys >= best_y
                best_y = np.where(take, ys, best_y)
                best_z = np.where(take, Zs, best_z)
        if not np.all(np.isfinite(best_y)):
            k = int(np.argmax(~np.isfinite(best_y)))
            raise NumericalAbort("non-finite regression target", step=i, path=k, point=x[k].tolist())
        y_fits[i] = fit_poly(x, best_y, degree)
        z_fits[i] = fit_poly(x, best_z, degree)
        resid[i] = y_fits[i].rms
    new_Y = []
    for X in prev_X:
        Y = np.empty(X.shape[:2])
        for i in range(N):
            Y[:, i] = y_fits[i](X[:, i, :])
        Y[:, N] = coeffs.phi(X[:, N, :])
        new_Y.append(Y)
    return PathBackward(y_fits, z_fits, resid, setting.x0_array), new_Y


def picard_solve_p_lt2(setting: GSetting, coeffs: CoefficientSet, grid=None, family=None, **kw) -> FBSDESolution:
    """The p in (1, 2) variant: needs sigma independent of y and Lambda~_p < 1."""
    if not 1 < setting.p < 2:
        raise InvalidProblem(f"picard_solve_p_lt2 needs p in (1, 2), got p={setting.p}")
    if coeffs.sigma_depends_on_y:
        raise InvalidProblem("for p in (1, 2) the diffusion coefficient must not depend on y; "
                             "set sigma_depends_on_y = false with a y-free sigma")
    return picard_solve(setting, coeffs, grid, family, **kw)


@dataclass
class ContractionTable:
    rows: list
    flags: list

    @property
    def passed(self) -> bool:
        return not self.flags

    def to_dict(self):
        return {"rows": self.rows, "flags": self.flags, "passed": self.passed}


def contraction_report(trace: ContractionTrace, constants_report=None) -> ContractionTable:
    """d_m against the envelope Lambda_p'^(m-1) d_1 with an error budget per row.

    budget_m = 5 SE_m + tol^p' (+ regression misfit on the paths backend).
    An object with a ``lambda_p_prime`` attribute may override the trace's constant.
    """
    lam = getattr(constants_report, "lambda_p_prime", None) or trace.lambda_p_prime
    rows, flags = [], []
    if not trace.rows:
        return ContractionTable(rows, flags)
    d1 = trace.rows[0].d_x
    for k, r in enumerate(trace.rows):
        env = lam ** (r.m - 1) * d1
        extra = trace.budget_extra[k] if k < len(trace.budget_extra) else 0.0
        budget = 5 * r.d_x_se + trace.tol ** trace.p_prime + extra ** trace.p_prime
        flag = r.d_x > env + budget
        rows.append({"m": r.m, "d_m": r.d_x, "ratio": r.ratio, "envelope": env, "budget": budget,
                     "flag": bool(flag)})
        if flag:
            flags.append(r.m)
    return ContractionTable(rows, flags)


@dataclass
class StabilityReport:
    passed: bool
    ratios: list  # fitted constant per grid
    lhs: list
    rhs: list
    n_steps: list
    label: str  # C4 or C5
    growth: float
    reason: str = ""

    def to_dict(self):
        return dict(self.__dict__)


def _unpack(problem):
    if isinstance(problem, ProblemCatalogEntry):
        return problem.setting, problem.coefficients
    return problem


def _perturbation_sides(sol1: FBSDESolution, sol2: FBSDESolution, p: float):
    c1, c2 = sol1.coeffs, sol2.coeffs
    dt = sol2.grid.dt
    N = sol2.grid.n_steps
    xh = float(np.linalg.norm(sol1.setting.x0_array - sol2.setting.x0_array))
    lhs, rhs = [], []
    for k, (f1, f2) in enumerate(zip(sol1.forward, sol2.forward)):
        X1, X2, Y2 = f1.states, f2.states, f2.y
        Z2 = sol2.z_along(k)
        lhs.append(np.max(np.linalg.norm(X1 - X2, axis=2), axis=1) ** p)
        drift = np.zeros(X2.shape[0])
        diff = np.zeros(X2.shape[0])
        for i in range(N):
            t = i * dt
            x, y, z = X2[:, i, :], Y2[:, i], Z2[:, i]
            drift += (np.linalg.norm(c1.b(t, x, y) - c2.b(t, x, y), axis=1)
                      + np.linalg.norm(c1.h(t, x, y) - c2.h(t, x, y), axis=1)
                      + np.abs(c1.f(t, x, y, z) - c2.f(t, x, y, z))
                      + np.abs(c1.g(t, x, y, z) - c2.g(t, x, y, z))) * dt
            diff += np.sum((c1.sigma(t, x, y) - c2.sigma(t, x, y)) ** 2, axis=1) * dt
        XT = X2[:, -1, :]
        phat = np.abs(c1.phi(XT) - c2.phi(XT))
        rhs.append((xh + phat + drift) ** p + diff ** (p / 2))
    L = per_control_stats(lhs, sol2.family)
    R = per_control_stats(rhs, sol2.family)
    return L.value, R.value


def perturbation_experiment(problem1, problem2, p: Optional[float] = None, n_steps: int = 20,
                            family_fn: Optional[Callable] = None, seed: int = 0, n_paths: int = 1000,
                            refine: bool = True, **solve_kw) -> StabilityReport:
    """Fitted constant E^[sup|X1 - X2|^p] / data bracket at N and 2N steps.

    The data bracket is evaluated along solution 2 with every coefficient
    difference taken as (set 1) - (set 2). PASS iff each ratio is finite and
    the refined ratio is at most twice the coarse one.
    """
    s1, c1 = _unpack(problem1)
    s2, c2 = _unpack(problem2)
    if (s1.sigma_low, s1.sigma_high, s1.T, s1.n) != (s2.sigma_low, s2.sigma_high, s2.T, s2.n):
        raise InvalidProblem("perturbation pair must share the volatility band, horizon and dimension")
    p = s2.p if p is None else p
    label = "C4" if p >= 2 else "C5"
    if p < 2 and (c1.sigma_depends_on_y or c2.sigma_depends_on_y):
        raise InvalidProblem("the p < 2 estimate needs sigma independent of y in both problems")
    grids = [n_steps, 2 * n_steps] if refine else [n_steps]
    ratios, lhs, rhs = [], [], []
    for Nn in grids:
        fam = family_fn(s2, Nn) if family_fn else ControlFamily.bang_bang(s2, Nn)
        # one lattice for both so that interpolation errors are shared
        center = 0.5 * (s1.x0_array + s2.x0_array)
        half = 0.5 * float(np.max(np.abs(s1.x0_array - s2.x0_array)))
        grid = DiscretizationGrid.build(s2, Nn, center=center, width=6.0 + half / (s2.sigma_high * math.sqrt(s2.T)))
        sol1 = picard_solve(s1, c1, grid, fam, seed=seed, n_paths=n_paths, with_k=False, **solve_kw)
        sol2 = picard_solve(s2, c2, grid, fam, seed=seed, n_paths=n_paths, with_k=False, **solve_kw)
        L, R = _perturbation_sides(sol1, sol2, p)
        lhs.append(L)
        rhs.append(R)
        ratios.append(L / R if R > 0 else (0.0 if L == 0 else math.inf))
    finite = all(math.isfinite(r) for r in ratios)
    growth = 1.0
    if len(ratios) == 2:
        growth = ratios[1] / ratios[0] if ratios[0] > 0 else (1.0 if ratios[1] == 0 else math.inf)
    passed = finite and growth <= 2.0
    reason = "" if passed else ("non-finite ratio" if not finite else f"ratio grew by {growth:.3g}")
    return StabilityReport(passed, ratios, lhs, rhs, grids, label, growth, reason)
