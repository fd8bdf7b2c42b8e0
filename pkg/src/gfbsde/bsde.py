"""Backward G-BSDE by dynamic programming on the state lattice.

One step of the scheme at a node x, for each volatility s in {lo, hi}::

    x'_k = x + drift dt + qv_drift s^2 dt + diffusion s sqrt(dt) xi_k
    E_s  = sum_k w_k Y_{i+1}(x'_k)
    Z_s  = sum_k w_k Y_{i+1}(x'_k) xi_k / (s sqrt(dt))
    Y_s  = E_s - f(t, x, E_s, Z_s) dt - g(t, x, E_s, Z_s) s^2 dt

and Y_i(x) = max_s Y_s, Z_i(x) = Z at the maximiser (hi on ties). For a
two-point stencil the step value is affine in s^2, so the max over the band
is attained at an end point. K is recovered along paths as the residual of
the backward equation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .gprocess import (ControlFamily, LatticeFunction, PathEnsemble, interp, per_control_stats,
                       quadrature_rule, sample_paths)
from .model import CoefficientSet, DiscretizationGrid, GSetting
from .sde import Feedback, NumericalAbort, euler_forward

__all__ = [
    "ForwardFlow",
    "BackwardProblem",
    "BackwardSolution",
    "KReport",
    "flow_from_policy",
    "problem_from_coeffs",
    "problem_from_inputs",
    "dp_backward",
    "k_extract",
    "k_tolerance",
    "driving_states",
    "bsde_apriori_check",
    "z_norm_check",
    "solve_bsde",
    "forward_states",
    "driving_flow",
]


@dataclass
class ForwardFlow:
    """Markov dynamics of the lattice state: each map is (i, x[m,n]) -> [m,n]."""

    drift: Callable
    qv_drift: Callable
    diffusion: Callable
    label: str = ""


def _policy_values(policy, i, x):
    if policy is None:
        return np.zeros(x.shape[0])
    return np.asarray(policy(i, x), dtype=float)


def flow_from_policy(coeffs: CoefficientSet, grid: DiscretizationGrid, policy=None) -> ForwardFlow:
    """Forward coefficients with y read from a y-policy (lattice function or feedback)."""
    dt = grid.dt

    def drift(i, x):
        return coeffs.b(i * dt, x, _policy_values(policy, i, x))

    def qv(i, x):
        return coeffs.h(i * dt, x, _policy_values(policy, i, x))

    def diff(i, x):
        return coeffs.sigma(i * dt, x, _policy_values(policy, i, x))

    return ForwardFlow(drift, qv, diff, "policy" if policy is not None else "zero-policy")


def _zeros(i, x):
    return np.zeros_like(x)


def _ones(i, x):
    return np.ones_like(x)


def driving_flow() -> ForwardFlow:
    """The lattice state is B itself."""
    return ForwardFlow(_zeros, _zeros, _ones, "B")


@dataclass
class BackwardProblem:
    """Driver and terminal function expressed in the lattice state s."""

    flow: ForwardFlow
    f: Callable  # (t, s, y, z) -> [m]
    g: Callable
    phi: Callable  # (s) -> [m]
    x_of_state: Optional[Callable] = None  # (t, s) -> x, when s is not the forward state
    label: str = ""


def problem_from_coeffs(coeffs: CoefficientSet, flow: ForwardFlow) -> BackwardProblem:
    return BackwardProblem(flow, coeffs.f, coeffs.g, coeffs.phi, None, flow.label)


def problem_from_inputs(coeffs: CoefficientSet, psi: Callable, T: float) -> BackwardProblem:
    """BSDE with x-input x_t = psi(t, B_t), solved on the B-lattice."""
    n = coeffs.n

    def xs(t, s):
        return np.asarray(psi(t, s[:, 0]), dtype=float).reshape(-1, n) * np.ones((s.shape[0], 1))

    def f(t, s, y, z):
        return coeffs.f(t, xs(t, s), y, z)

    def g(t, s, y, z):
        return coeffs.g(t, xs(t, s), y, z)

    def phi(s):
        return coeffs.phi(xs(T, s))

    return BackwardProblem(driving_flow(), f, g, phi, xs, "x-input")


@dataclass
class BackwardSolution:
    y_fn: LatticeFunction
    z_fn: LatticeFunction
    choice: np.ndarray  # (N, M): 1 where the top volatility was selected
    problem: BackwardProblem = field(repr=False)
    grid: DiscretizationGrid = field(repr=False)

    def y0(self, x0) -> float:
        return float(self.y_fn(0, np.atleast_2d(np.asarray(x0, float)))[0])

    def z0(self, x0) -> float:
        return float(self.z_fn(0, np.atleast_2d(np.asarray(x0, float)))[0])


def dp_backward(problem: BackwardProblem, grid: DiscretizationGrid, setting: GSetting,
                implicit: bool = False, implicit_iters: int = 5) -> BackwardSolution:
    """Backward sweep over the lattice; see the module docstring."""
    nodes = grid.nodes()
    M = nodes.shape[0]
    N, dt = grid.n_steps, grid.dt
    sq = math.sqrt(dt)
    qn, qw = quadrature_rule(grid.quadrature)
    vols = [setting.sigma_low, setting.sigma_high] if setting.sigma_low < setting.sigma_high else [setting.sigma_high]
    shape = grid.shape
    Yv = np.empty((N + 1, M))
    Zv = np.empty((N + 1, M))
    choice = np.zeros((N, M), dtype=np.int8)
    Yv[N] = problem.phi(nodes)
    if not np.all(np.isfinite(Yv[N])):
        k = int(np.argmax(~np.isfinite(Yv[N])))
        raise NumericalAbort("terminal value not finite", step=N, point=nodes[k].tolist())
    for i in range(N - 1, -1, -1):
        t = i * dt
        nxt = Yv[i + 1].reshape(shape)
        drift = problem.flow.drift(i, nodes)
        qv = problem.flow.qv_drift(i, nodes)
        dif = problem.flow.diffusion(i, nodes)
        best_y = best_z = None
        for j, s in enumerate(vols):
            base = nodes + drift * dt + qv * (s * s * dt)
            E = np.zeros(M)
            Zs = np.zeros(M)
            for xk, wk in zip(qn, qw):
                v = interp(grid, nxt, base + dif * (s * sq * xk))
                E += wk * v
                Zs += wk * xk * v
            Zs /= s * sq
            y = E - problem.f(t, nodes, E, Zs) * dt - problem.g(t, nodes, E, Zs) * (s * s * dt)
            if implicit:
                for _ in range(implicit_iters):
                    y = E - problem.f(t, nodes, y, Zs) * dt - problem.g(t, nodes, y, Zs) * (s * s * dt)
            if best_y is None:
                best_y, best_z = y, Zs
            else:
                take = y >= best_y  # later entry is the top volatility: wins ties
                best_y = np.where(take, y, best_y)
                best_z = np.where(take, Zs, best_z)
                choice[i] = take
        bad = ~np.isfinite(best_y)
        if bad.any():
            k = int(np.argmax(bad))
            raise NumericalAbort("non-finite lattice value", step=i, point=nodes[k].tolist())
        Yv[i] = best_y
        Zv[i] = best_z
    Zv[N] = Zv[N - 1]
    full = (N + 1,) + shape
    return BackwardSolution(LatticeFunction(grid, Yv.reshape(full)), LatticeFunction(grid, Zv.reshape(full)),
                            choice, problem, grid)


def driving_states(ensemble: PathEnsemble) -> np.ndarray:
    """B paths shaped as lattice states (n_paths, N+1, 1)."""
    return ensemble.B[:, :, None]


@dataclass
class KReport:
    K: list  # per control: (n_paths, N+1)
    Y: list
    Z: list
    max_increment: float
    max_drawup: float
    kT_means: np.ndarray
    kT_stderrs: np.ndarray
    sup_mean: float
    sup_stderr: float
    argmax: int
    tol_K: float
    scale: float
    grid_tol: float = 0.0  # interpolation drift allowed on E[K_T] off the lattice nodes

    @property
    def monotone_ok(self) -> bool:
        return self.max_increment <= self.tol_K

    @property
    def martingale_ok(self) -> bool:
        return abs(self.sup_mean) <= 5 * self.sup_stderr + self.grid_tol + 1e-9 * max(self.scale, 1.0)

    def to_dict(self):
        return {"max_positive_increment": self.max_increment, "max_drawup": self.max_drawup,
                "tol_K": self.tol_K, "sup_mean_KT": self.sup_mean, "sup_stderr_KT": self.sup_stderr,
                "argmax_control": self.argmax, "monotone_ok": self.monotone_ok,
                "martingale_ok": self.martingale_ok, "grid_tol": self.grid_tol,
                "per_control_mean_KT": [float(v) for v in self.kT_means]}


def k_tolerance(dt: float, scale: float) -> float:
    return 3.0 * math.sqrt(dt) * max(scale, 1e-12)


def _k_paths(sol: BackwardSolution, ensemble: PathEnsemble, states: np.ndarray):
    pb = sol.problem
    grid = sol.grid
    P, N1, n = states.shape
    N = N1 - 1
    dt = grid.dt
    Y = np.empty((P, N1))
    Z = np.empty((P, N1))
    for i in range(N):
        Y[:, i] = sol.y_fn(i, states[:, i, :])
        Z[:, i] = sol.z_fn(i, states[:, i, :])
    Y[:, N] = pb.phi(states[:, N, :])
    Z[:, N] = Z[:, N - 1]
    K = np.zeros((P, N1))
    dq = ensemble.qv_increments
    for i in range(N):
        t = i * dt
        s = states[:, i, :]
        dK = (Y[:, i + 1] - Y[:, i] - pb.f(t, s, Y[:, i], Z[:, i]) * dt - pb.g(t, s, Y[:, i], Z[:, i]) * dq[i]
              - Z[:, i] * ensemble.increments[:, i])
        K[:, i + 1] = K[:, i] + dK
    return K, Y, Z


def k_extract(sol: BackwardSolution, ensembles, states_list, family: Optional[ControlFamily] = None) -> KReport:
    """Residual K along each ensemble; diagnostics over the whole family.

    ``states_list[c]`` are the lattice-state paths under ``ensembles[c]``.
    """
    Ks, Ys, Zs = [], [], []
    for ens, st in zip(ensembles, states_list):
        K, Y, Z = _k_paths(sol, ens, st)
        Ks.append(K)
        Ys.append(Y)
        Zs.append(Z)
    inc = max(float(np.max(np.diff(K, axis=1), initial=0.0)) for K in Ks)
    drawup = max(float(np.max(K - np.minimum.accumulate(K, axis=1))) for K in Ks)
    scale = math.sqrt(max(float(np.mean(np.max(Y ** 2, axis=1))) for Y in Ys))
    stats = per_control_stats([K[:, -1] for K in Ks], family)
    return KReport(Ks, Ys, Zs, max(inc, 0.0), drawup, stats.means, stats.stderrs, stats.value, stats.stderr,
                   stats.argmax, k_tolerance(sol.grid.dt, scale), scale, sol.grid.dt * max(scale, 1.0))


@dataclass
class AprioriVerdict:
    passed: bool
    lhs: float
    rhs: float
    rhs_se: float
    constant: float
    margin: float
    ratio: float

    def to_dict(self):
        return {"passed": self.passed, "lhs": self.lhs, "rhs": self.rhs, "rhs_se": self.rhs_se,
                "constant": self.constant, "margin": self.margin, "ratio": self.ratio}


def bsde_apriori_check(coeffs: CoefficientSet, setting: GSetting, grid: DiscretizationGrid,
                       family: ControlFamily, psi1: Callable, psi2: Callable, p: Optional[float] = None,
                       n_paths: int = 2000, seed: int = 0, c2: Optional[float] = None,
                       model: str = "normal") -> AprioriVerdict:
    """t = 0 instance of |Y1 - Y2|^p <= C2 E^[(|phi^| + int |f^| + |g^| ds)^p].

    The x-inputs are x^(k)_t = psi_k(t, B_t); each BSDE is solved on the
    B-lattice, and f^, g^ are evaluated at (Y2, Z2) read along the paths.
    """
    from .constants import c2 as c2_const

    p = setting.p if p is None else p
    if c2 is None:
        c2 = c2_const(p, setting.T, coeffs.L1, setting.sigma_high, setting.sigma_low)
    pb1 = problem_from_inputs(coeffs, psi1, setting.T)
    pb2 = problem_from_inputs(coeffs, psi2, setting.T)
    s1 = dp_backward(pb1, grid, setting)
    s2 = dp_backward(pb2, grid, setting)
    lhs = abs(s1.y0([0.0]) - s2.y0([0.0])) ** p
    samples = []
    dt = grid.dt
    for ctl in family:
        ens = sample_paths(grid, ctl, n_paths, seed, setting, model)
        Bst = driving_states(ens)
        acc = np.zeros(n_paths)
        for i in range(grid.n_steps):
            t = i * dt
            s = Bst[:, i, :]
            y2 = s2.y_fn(i, s)
            z2 = s2.z_fn(i, s)
            x1 = pb1.x_of_state(t, s)
            x2 = pb2.x_of_state(t, s)
            acc += np.abs(coeffs.f(t, x1, y2, z2) - coeffs.f(t, x2, y2, z2)) * dt
            acc += np.abs(coeffs.g(t, x1, y2, z2) - coeffs.g(t, x2, y2, z2)) * dt
        sT = Bst[:, -1, :]
        acc += np.abs(pb1.phi(sT) - pb2.phi(sT))
        samples.append(acc ** p)
    R = per_control_stats(samples, family)
    if R.value == 0:
        bound = 0.0
    else:
        bound = c2 * (R.value + 5 * R.stderr)
    passed = lhs <= bound + 1e-12 * max(1.0, abs(s1.y0([0.0])))
    ratio = lhs / R.value if R.value > 0 else (0.0 if lhs == 0 else math.inf)
    return AprioriVerdict(bool(passed), lhs, R.value, R.stderr, c2, bound - lhs, ratio)


def z_norm_check(sol1: BackwardSolution, sol2: BackwardSolution, setting: GSetting, family: ControlFamily,
                 p: Optional[float] = None, n_paths: int = 2000, seed: int = 0, model: str = "normal",
                 coeffs: Optional[CoefficientSet] = None, states_fn: Optional[Callable] = None) -> dict:
    """Fitted constant for the Z estimate (no explicit constant exists).

    ratio = E^[(int |Z1-Z2|^2 dt)^(p/2)] / (E^[sup|Y1-Y2|^p] + (L1+L2)^(1/2) E^[sup|Y1-Y2|^p]^(1/2)),
    where L_k = E^[sup|Y_k|^p] + E^[(int |f_k(.,0,0)| + |g_k(.,0,0)| ds)^p] are the data terms.
    Both solutions must live on the same lattice state (B by default).
    """
    p = setting.p if p is None else p
    grid = sol1.grid
    dt = grid.dt
    zs, ys, data1, data2 = [], [], [], []
    for ctl in family:
        ens = sample_paths(grid, ctl, n_paths, seed, setting, model)
        st = driving_states(ens) if states_fn is None else states_fn(ens)
        _, Y1, Z1 = _k_paths(sol1, ens, st)
        _, Y2, Z2 = _k_paths(sol2, ens, st)
        zs.append((np.sum((Z1[:, :-1] - Z2[:, :-1]) ** 2, axis=1) * dt) ** (p / 2))
        ys.append(np.max(np.abs(Y1 - Y2), axis=1) ** p)
        for sol, Y, out in ((sol1, Y1, data1), (sol2, Y2, data2)):
            pb = sol.problem
            acc = np.zeros(n_paths)
            dq = ens.qv_increments
            zero = np.zeros(n_paths)
            for i in range(grid.n_steps):
                s = st[:, i, :]
                acc += np.abs(pb.f(i * dt, s, zero, zero)) * dt + np.abs(pb.g(i * dt, s, zero, zero)) * dq[i]
            out.append(np.max(np.abs(Y), axis=1) ** p + acc ** p)
    Zn = per_control_stats(zs, family)
    Yn = per_control_stats(ys, family)
    L1 = per_control_stats(data1, family)
    L2 = per_control_stats(data2, family)
    denom = Yn.value + math.sqrt(L1.value + L2.value) * math.sqrt(Yn.value)
    ratio = Zn.value / denom if denom > 0 else 0.0
    return {"lhs": Zn.value, "lhs_se": Zn.stderr, "y_norm": Yn.value, "data_1": L1.value, "data_2": L2.value,
            "denominator": denom, "ratio": ratio}


def solve_bsde(coeffs: CoefficientSet, setting: GSetting, grid: DiscretizationGrid, policy=None,
               implicit: bool = False) -> BackwardSolution:
    """Decoupled stage: forward flow from a fixed y-policy (zero by default)."""
    flow = flow_from_policy(coeffs, grid, policy)
    return dp_backward(problem_from_coeffs(coeffs, flow), grid, setting, implicit=implicit)


def forward_states(coeffs, setting, grid, ensembles, policy) -> list:
    """Forward paths under each ensemble with y read from ``policy`` at the current state."""
    fb = policy if policy is None or isinstance(policy, (LatticeFunction, Feedback)) else Feedback(policy)
    return [euler_forward(coeffs, grid, e, setting.x0, fb) for e in ensembles]
