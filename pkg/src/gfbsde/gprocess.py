"""Discrete G-Brownian motion.

Paths are simulated under a single deterministic volatility control at a
time; the G-expectation is approximated from below by maximising over a finite
:class:`ControlFamily`. The lattice backend solves the discrete G-heat
recursion exactly per step (the sup over the band is attained at an end point).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import DiscretizationGrid, GSetting, InvalidProblem

__all__ = [
    "VolatilityControl",
    "ControlFamily",
    "PathEnsemble",
    "LatticeFunction",
    "MCResult",
    "sample_paths",
    "sample_family",
    "gexpect_lattice",
    "gexpect_mc",
    "sup_over_family",
    "quadrature_rule",
    "qv_sandwich_holds",
    "bdg_check",
    "gexp_grid",
    "parallel_map",
]

_BAND_RTOL = 8 * np.finfo(float).eps


def parallel_map(fn, items, threads: int = 1):
    """Order-preserving map; results never depend on the worker count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


@dataclass(frozen=True)
class VolatilityControl:
    """Per-step squared volatility (variance rate), one value per time step."""

    values: tuple
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values)

    def check_band(self, setting: GSetting) -> None:
        g = self.array
        lo, hi = setting.sigma_low ** 2, setting.sigma_high ** 2
        if g.size == 0 or np.any(g < lo * (1 - _BAND_RTOL)) or np.any(g > hi * (1 + _BAND_RTOL)):
            raise InvalidProblem(f"control '{self.label}' leaves the band [{lo}, {hi}]")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class ControlFamily:
    controls: tuple

    def __post_init__(self):
        if not self.controls:
            raise InvalidProblem("control family is empty")

    @classmethod
    def constants(cls, setting: GSetting, n_steps: int):
        lo, hi = setting.sigma_low ** 2, setting.sigma_high ** 2
        return cls((VolatilityControl((lo,) * n_steps, "const-low"), VolatilityControl((hi,) * n_steps, "const-high")))

    @classmethod
    def bang_bang(cls, setting: GSetting, n_steps: int, n_switch: int = 2, include_mid: bool = False):
        """Both constants plus low->high and high->low switches at ``n_switch`` times."""
        lo, hi = setting.sigma_low ** 2, setting.sigma_high ** 2
        ctl = list(cls.constants(setting, n_steps).controls)
        for j in range(1, n_switch + 1):
            k = int(round(j * n_steps / (n_switch + 1)))
            if not 0 < k < n_steps:
                continue
            ctl.append(VolatilityControl((lo,) * k + (hi,) * (n_steps - k), f"low-high@{k}"))
            ctl.append(VolatilityControl((hi,) * k + (lo,) * (n_steps - k), f"high-low@{k}"))
        if include_mid:
            ctl.append(VolatilityControl((0.5 * (lo + hi),) * n_steps, "const-mid"))
        return cls(tuple(ctl))

    @classmethod
    def single(cls, gamma: float, n_steps: int):
        return cls((VolatilityControl((gamma,) * n_steps, f"const-{gamma:g}"),))

    def __len__(self):
        return len(self.controls)

    def __iter__(self):
        return iter(self.controls)

    def __getitem__(self, i):
        return self.controls[i]


@dataclass
class PathEnsemble:
    """Increments under one control. ``qv`` is deterministic, shape (N+1,)."""

    increments: np.ndarray
    qv: np.ndarray
    control: VolatilityControl
    seed: Optional[int]
    dt: float
    model: str = "normal"

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    @property
    def B(self) -> np.ndarray:
        """Paths including B_0 = 0, shape (n_paths, N+1)."""
        out = np.zeros((self.n_paths, self.n_steps + 1))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    @property
    def qv_increments(self) -> np.ndarray:
        return np.diff(self.qv)


def _noise(rng, shape, model):
    if model == "normal":
        return rng.standard_normal(shape)
    if model == "two-point":
        return 2.0 * rng.integers(0, 2, size=shape) - 1.0
    raise InvalidProblem(f"unknown increment model '{model}'")


def sample_paths(grid: DiscretizationGrid, control: VolatilityControl, n_paths: int, seed: int,
                 setting: Optional[GSetting] = None, model: str = "normal") -> PathEnsemble:
    """Increments sqrt(gamma_i dt) * xi_i; the same seed gives the same xi for every control."""
    if len(control) != grid.n_steps:
        raise InvalidProblem(f"control length {len(control)} does not match n_steps={grid.n_steps}")
    if setting is not None:
        control.check_band(setting)
    g = control.array
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise InvalidProblem("control values must be finite and nonnegative")
    rng = np.random.default_rng(seed)
    xi = _noise(rng, (n_paths, grid.n_steps), model)
    inc = xi * np.sqrt(g * grid.dt)
    qv = np.concatenate([[0.0], np.cumsum(g * grid.dt)])
    return PathEnsemble(inc, qv, control, seed, grid.dt, model)


def sample_family(grid, family: ControlFamily, n_paths: int, seed: int, setting=None, model="normal"):
    return [sample_paths(grid, c, n_paths, seed, setting, model) for c in family]


def qv_sandwich_holds(ens: PathEnsemble, setting: GSetting) -> bool:
    """lo^2 s <= <B>_{t+s} - <B>_t <= hi^2 s for every pair of grid times."""
    q = ens.qv
    t = ens.times
    ds = t[None, :] - t[:, None]
    dq = q[None, :] - q[:, None]
    upper = np.triu(np.ones_like(ds, dtype=bool), 1)
    tol = _BAND_RTOL * max(setting.sigma_high ** 2 * setting.T, 1e-300)
    lo_ok = dq >= setting.sigma_low ** 2 * ds - tol
    hi_ok = dq <= setting.sigma_high ** 2 * ds + tol
    return bool(np.all((lo_ok & hi_ok)[upper]))


def quadrature_rule(tag: str):
    """Standard-normal quadrature nodes and weights (two-point is +-1)."""
    if tag == "two-point":
        return np.array([-1.0, 1.0]), np.array([0.5, 0.5])
    if tag in ("gh3", "gh5"):
        k = int(tag[2:])
        nodes, w = np.polynomial.hermite_e.hermegauss(k)
        return nodes, w / w.sum()
    raise InvalidProblem(f"unknown quadrature '{tag}'")


class LatticeFunction:
    """Values on (time index, lattice node) with multilinear interpolation.

    Outside the box the boundary cell is extended linearly. Query points
    within 1e-9 cells of a node take the node value exactly.
    """

    def __init__(self, grid: DiscretizationGrid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape[1:] != grid.shape:
            raise InvalidProblem(f"values shape {values.shape} does not match lattice {grid.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidProblem("lattice function has non-finite values")
        self.grid = grid
        self.values = values

    def __call__(self, i: int, x) -> np.ndarray:
        return interp(self.grid, self.values[i], x)

    @property
    def n_times(self):
        return self.values.shape[0]


def _cell(grid, x):
    """Per-coordinate lower cell index and fractional weight."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    idx = []
    wts = []
    for j in range(len(grid.n_space)):
        lo, hi, k = grid.space_min[j], grid.space_max[j], grid.n_space[j]
        h = (hi - lo) / (k - 1)
        u = (x[:, j] - lo) / h
        r = np.rint(u)
        u = np.where(np.abs(u - r) < 1e-9, r, u)
        i = np.clip(np.floor(u), 0, k - 2).astype(np.intp)
        idx.append(i)
        wts.append(u - i)
    return idx, wts


def interp(grid: DiscretizationGrid, vals: np.ndarray, x) -> np.ndarray:
    """Multilinear interpolation of one time slice at points x (m, n)."""
    idx, wts = _cell(grid, x)
    d = len(idx)
    if d == 1:
        i, w = idx[0], wts[0]
        v = vals
        return v[i] * (1 - w) + v[i + 1] * w
    out = 0.0
    for corner in range(1 << d):
        sl = []
        wt = 1.0
        for j in range(d):
            bit = (corner >> j) & 1
            sl.append(idx[j] + bit)
            wt = wt * (wts[j] if bit else 1 - wts[j])
        out = out + wt * vals[tuple(sl)]
    return out


def gexp_grid(setting: GSetting, n_steps: int, quadrature: str = "two-point", width: float = 6.0,
              nodes_per_step: Optional[int] = None) -> DiscretizationGrid:
    """Lattice for B itself: centred at 0, hi-volatility moves land on nodes."""
    return DiscretizationGrid.build(setting, n_steps, center=np.zeros(setting.n), quadrature=quadrature,
                                    width=width, nodes_per_step=nodes_per_step)


def gexpect_lattice(payoff: Callable, setting: GSetting, grid: DiscretizationGrid, x_start: float = 0.0,
                    return_function: bool = False):
    """Backward G-heat recursion for E^[payoff(x_start + B_T)] in one dimension.

    u_N = payoff; u_i(x) = max over s in {lo, hi} of sum_k w_k u_{i+1}(x + s sqrt(dt) xi_k).
    """
    if len(grid.n_space) != 1:
        raise InvalidProblem("gexpect_lattice works on a one-dimensional lattice")
    x = grid.axis(0)
    u = np.asarray(payoff(x), dtype=float) * np.ones_like(x)
    if not np.all(np.isfinite(u)):
        raise InvalidProblem("payoff is not finite on the lattice")
    nodes, w = quadrature_rule(grid.quadrature)
    sq = math.sqrt(grid.dt)
    vols = sorted({setting.sigma_low, setting.sigma_high})
    history = [u] if return_function else None
    for _ in range(grid.n_steps):
        best = None
        for s in vols:
            cand = sum(wk * interp(grid, u, x + s * sq * xk) for xk, wk in zip(nodes, w))
            best = cand if best is None else np.maximum(best, cand)
        u = best
        if return_function:
            history.append(u)
    val = float(interp(grid, u, np.array([x_start]))[0])
    if return_function:
        return val, LatticeFunction(grid, np.array(history[::-1]))
    return val


@dataclass
class MCResult:
    value: float
    argmax: int
    means: np.ndarray
    stderrs: np.ndarray
    labels: list = field(default_factory=list)

    @property
    def stderr(self) -> float:
        return float(self.stderrs[self.argmax])

    def to_dict(self):
        return {"value": self.value, "stderr": self.stderr, "argmax": self.argmax,
                "argmax_label": self.labels[self.argmax] if self.labels else None,
                "per_control": [{"label": lab, "mean": float(m), "stderr": float(s)}
                                for lab, m, s in zip(self.labels, self.means, self.stderrs)]}


def sup_over_family(values: Sequence[float], family: Optional[ControlFamily] = None, atol: float = 0.0):
    """Max of a per-control statistic; ties (within atol) go to the lowest index."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise InvalidProblem("empty family")
    if family is not None and len(family) != v.size:
        raise InvalidProblem("statistic length does not match the family")
    top = v.max()
    i = int(np.flatnonzero(v >= top - atol)[0])
    return float(v[i]), i


def per_control_stats(samples: Sequence[np.ndarray], family: Optional[ControlFamily] = None) -> MCResult:
    means = np.array([float(np.mean(s)) for s in samples])
    ses = np.array([float(np.std(s, ddof=1) / math.sqrt(len(s))) if len(s) > 1 else 0.0 for s in samples])
    val, i = sup_over_family(means, family)
    labels = [c.label for c in family] if family is not None else []
    return MCResult(val, i, means, ses, labels)


def gexpect_mc(payoff: Callable, setting: GSetting, grid: DiscretizationGrid, family: ControlFamily,
               n_paths: int, seed: int, x_start: float = 0.0, model: str = "normal", threads: int = 1) -> MCResult:
    """Max over the family of MC means of payoff(x_start + B_T): a lower bound for E^."""

    def one(ctl):
        ens = sample_paths(grid, ctl, n_paths, seed, setting, model)
        return np.asarray(payoff(x_start + ens.increments.sum(axis=1)), dtype=float)

    return per_control_stats(parallel_map(one, family.controls, threads), family)


def bdg_check(setting: GSetting, grid: DiscretizationGrid, family: ControlFamily, n_paths: int, seed: int,
              p: float = 2.0, cp: Optional[Callable] = None) -> dict:
    """Sup-family MC of E[sup_t |B_t|^p] against hi^p C(p) T^(p/2)."""
    from .constants import bdg_constant

    samples = [np.max(np.abs(e.B), axis=1) ** p for e in sample_family(grid, family, n_paths, seed, setting)]
    res = per_control_stats(samples, family)
    bound = setting.sigma_high ** p * bdg_constant(p, cp) * setting.T ** (p / 2)
    return {"estimate": res.value, "stderr": res.stderr, "bound": bound, "passed": res.value <= bound}
