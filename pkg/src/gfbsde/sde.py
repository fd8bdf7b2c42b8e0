"""Forward G-SDE: explicit Euler under one volatility control, and the stability check."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .gprocess import ControlFamily, LatticeFunction, PathEnsemble, per_control_stats, sample_paths
from .model import CoefficientSet, DiscretizationGrid, GSetting

__all__ = [
    "NumericalAbort",
    "Feedback",
    "ForwardSolution",
    "StabilityVerdict",
    "euler_forward",
    "read_y",
    "sde_stability_check",
]


class NumericalAbort(RuntimeError):
    """Non-finite value met during a sweep; carries where it happened."""

    def __init__(self, message: str, step: Optional[int] = None, path: Optional[int] = None,
                 point=None):
        self.step = step
        self.path = path
        self.point = point
        loc = []
        if step is not None:
            loc.append(f"step {step}")
        if path is not None:
            loc.append(f"path {path}")
        if point is not None:
            loc.append(f"x={point}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)


class Feedback:
    """Y read from the current state: ``fn(i, x[m, n]) -> y[m]``."""

    def __init__(self, fn: Callable, tag: str = "feedback"):
        self.fn = fn
        self.tag = tag

    def __call__(self, i, x):
        return self.fn(i, x)


@dataclass
class ForwardSolution:
    states: np.ndarray  # (n_paths, N+1, n)
    y: np.ndarray  # (n_paths, N+1), the Y values fed into the coefficients
    control: object
    y_source: str

    @property
    def X(self) -> np.ndarray:
        return self.states

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]


def _y_source(y_input):
    if y_input is None:
        return "zero"
    if isinstance(y_input, (LatticeFunction, Feedback)):
        return "lattice" if isinstance(y_input, LatticeFunction) else y_input.tag
    if callable(y_input):
        return "process(t,B)"
    if np.ndim(y_input) == 0:
        return "constant"
    return "fixed-paths"


def read_y(y_input, i, t, B_i, x_i, n_paths):
    """Y at step i for every path, from any supported y_input form."""
    if y_input is None:
        return np.zeros(n_paths)
    if isinstance(y_input, (LatticeFunction, Feedback)):
        return np.asarray(y_input(i, x_i), dtype=float)
    if callable(y_input):
        return np.broadcast_to(np.asarray(y_input(t, B_i), dtype=float), (n_paths,))
    arr = np.asarray(y_input, dtype=float)
    if arr.ndim == 0:
        return np.full(n_paths, float(arr))
    return arr[:, i]


def euler_forward(coeffs: CoefficientSet, grid: DiscretizationGrid, ensemble: PathEnsemble, x0,
                  y_input=None) -> ForwardSolution:
    """X_{i+1} = X_i + b dt + h gamma_i dt + sigma dB_i with Y_i from ``y_input``.

    ``y_input`` may be None (zero), a number, an array (n_paths, N+1), a
    callable ``(t, B_t) -> y`` (an exogenous process), or a
    :class:`LatticeFunction` / :class:`Feedback` read at the current state.
    """
    P, N = ensemble.n_paths, ensemble.n_steps
    if N != grid.n_steps:
        raise ValueError("ensemble and grid disagree on the number of steps")
    n = coeffs.n
    X = np.empty((P, N + 1, n))
    X[:, 0, :] = np.broadcast_to(np.asarray(x0, dtype=float), (n,))
    Y = np.empty((P, N + 1))
    dt = grid.dt
    dq = ensemble.qv_increments
    B = np.zeros(P)
    for i in range(N):
        t = i * dt
        xi = X[:, i, :]
        y = read_y(y_input, i, t, B, xi, P)
        Y[:, i] = y
        dB = ensemble.increments[:, i]
        X[:, i + 1, :] = (xi + coeffs.b(t, xi, y) * dt + coeffs.h(t, xi, y) * dq[i]
                          + coeffs.sigma(t, xi, y) * dB[:, None])
        B = B + dB
        bad = ~np.isfinite(X[:, i + 1, :]).all(axis=1)
        if bad.any():
            raise NumericalAbort("non-finite forward state", step=i + 1, path=int(np.argmax(bad)))
    Y[:, N] = read_y(y_input, N, N * dt, B, X[:, N, :], P)
    return ForwardSolution(X, Y, ensemble.control, _y_source(y_input))


@dataclass
class StabilityVerdict:
    passed: bool
    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float
    c1: float
    margin: float
    ratio: float
    label: str = ""

    def to_dict(self):
        return {"passed": self.passed, "lhs": self.lhs, "rhs": self.rhs, "lhs_se": self.lhs_se,
                "rhs_se": self.rhs_se, "constant": self.c1, "margin": self.margin, "ratio": self.ratio}


def _verdict(lhs_samples, rhs_samples, family, const, label=""):
    L = per_control_stats(lhs_samples, family)
    R = per_control_stats(rhs_samples, family)
    if R.value == 0:
        # zero data: only MC noise on the left may remain
        bound = 5 * L.stderr
    else:
        se = math.sqrt(L.stderr ** 2 + (const * R.stderr) ** 2)
        bound = const * R.value + 5 * se
    passed = L.value <= bound
    ratio = L.value / R.value if R.value > 0 else (0.0 if L.value == 0 else math.inf)
    return StabilityVerdict(bool(passed), L.value, R.value, L.stderr, R.stderr, const, bound - L.value, ratio,
                            label)


def sde_stability_check(coeffs: CoefficientSet, setting: GSetting, grid: DiscretizationGrid,
                        family: ControlFamily, y1, y2, p: Optional[float] = None, n_paths: int = 2000,
                        seed: int = 0, c1: Optional[float] = None, cp=None,
                        model: str = "normal") -> StabilityVerdict:
    """Sup-family MC of both sides of the forward stability estimate.

    LHS = E^[sup_t |X1 - X2|^p]; RHS = E^[(int |b^|+|h^| dt)^p + (int |sigma^|^2 dt)^(p/2)]
    with b^ = b(X2, y1) - b(X2, y2) etc. Both use the same paths per control.
    """
    from .constants import c1 as c1_const

    p = setting.p if p is None else p
    if c1 is None:
        c1 = c1_const(p, setting.T, setting.n, coeffs.L1, setting.sigma_high, cp)
    lhs_s, rhs_s = [], []
    dt = grid.dt
    for ctl in family:
        ens = sample_paths(grid, ctl, n_paths, seed, setting, model)
        s1 = euler_forward(coeffs, grid, ens, setting.x0, y1)
        s2 = euler_forward(coeffs, grid, ens, setting.x0, y2)
        diff = np.linalg.norm(s1.states - s2.states, axis=2)
        lhs_s.append(np.max(diff, axis=1) ** p)
        ib = np.zeros(n_paths)
        isg = np.zeros(n_paths)
        for i in range(grid.n_steps):
            t = i * dt
            x2 = s2.states[:, i, :]
            a, b_ = s1.y[:, i], s2.y[:, i]
            ib += (np.linalg.norm(coeffs.b(t, x2, a) - coeffs.b(t, x2, b_), axis=1)
                   + np.linalg.norm(coeffs.h(t, x2, a) - coeffs.h(t, x2, b_), axis=1)) * dt
            isg += np.sum((coeffs.sigma(t, x2, a) - coeffs.sigma(t, x2, b_)) ** 2, axis=1) * dt
        rhs_s.append(ib ** p + isg ** (p / 2))
    return _verdict(lhs_s, rhs_s, family, c1, "sde")
