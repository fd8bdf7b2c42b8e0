"""Problem definition: G-setting, coefficients, grids and problem files."""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .expr import Expression, ExpressionError

__all__ = [
    "InvalidProblem",
    "GSetting",
    "CoefficientSet",
    "DiscretizationGrid",
    "ProblemCatalogEntry",
    "ValidationReport",
    "validate_problem",
    "load_problem",
    "parse_problem",
    "catalog",
    "catalog_entry",
]

QUADRATURES = ("two-point", "gh3", "gh5")


class InvalidProblem(ValueError):
    """Raised when a setting, coefficient set or problem file is malformed."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}, column {column or 1}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class GSetting:
    """Volatility band, exponents, dimension, horizon and initial state.

    ``classical=True`` allows ``sigma_low == sigma_high`` (no volatility
    uncertainty), which reduces everything to the classical Wiener case.
    """

    sigma_low: float
    sigma_high: float
    p: float
    beta: float
    n: int
    T: float
    x0: tuple
    classical: bool = False

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x0", tuple(float(v) for v in x0))
        lo, hi = self.sigma_low, self.sigma_high
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo <= 0:
            raise InvalidProblem(f"volatility bounds must be finite with sigma_low > 0 (got {lo}, {hi})")
        if lo > hi:
            raise InvalidProblem(f"sigma_low={lo} exceeds sigma_high={hi}")
        if lo == hi and not self.classical:
            raise InvalidProblem("sigma_low == sigma_high requires the classical_reduction flag")
        if not 1 < self.p < self.beta:
            raise InvalidProblem(f"need 1 < p < beta (got p={self.p}, beta={self.beta})")
        if int(self.n) != self.n or self.n < 1:
            raise InvalidProblem(f"n must be a positive integer (got {self.n})")
        if not (np.isfinite(self.T) and self.T > 0):
            raise InvalidProblem(f"T must be positive (got {self.T})")
        if len(self.x0) != self.n:
            raise InvalidProblem(f"x0 has length {len(self.x0)}, expected n={self.n}")

    @property
    def x0_array(self) -> np.ndarray:
        return np.asarray(self.x0, dtype=float)

    def G(self, a):
        """Sublinear generator 0.5*(hi^2 a^+ - lo^2 a^-)."""
        a = np.asarray(a, dtype=float)
        return 0.5 * (self.sigma_high ** 2 * np.maximum(a, 0) - self.sigma_low ** 2 * np.maximum(-a, 0))

    def working_box(self, width: float = 6.0, scale: float = 1.0, center=None):
        c = self.x0_array if center is None else np.broadcast_to(np.asarray(center, float), (self.n,))
        half = width * self.sigma_high * math.sqrt(self.T) * scale
        return c - half, c + half

    def to_dict(self) -> dict:
        return {
            "sigma_low": self.sigma_low,
            "sigma_high": self.sigma_high,
            "p": self.p,
            "beta": self.beta,
            "n": self.n,
            "T": self.T,
            "x0": list(self.x0),
            "classical": self.classical,
        }


def _as_rows(x, n):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 and n == 1:
        x = x[:, None]
    return np.atleast_2d(x)


class _VectorExpr:
    """n component expressions acting on (t, x[m, n], y[m]) -> (m, n)."""

    def __init__(self, exprs, n):
        self.exprs = exprs
        self.n = n

    def __call__(self, t, x, y):
        x = _as_rows(x, self.n)
        m = x.shape[0]
        env = {"t": t, "y": np.broadcast_to(np.asarray(y, float), (m,))}
        for j in range(self.n):
            env[f"x{j + 1}"] = x[:, j]
        out = np.empty((m, self.n))
        for j, e in enumerate(self.exprs):
            out[:, j] = np.broadcast_to(e.evaluate(env), (m,))
        return out

    def depends_on(self, name):
        return any(e.depends_on(name) for e in self.exprs)


class _ScalarExpr:
    def __init__(self, expr, n, args):
        self.expr = expr
        self.n = n
        self.args = args

    def __call__(self, *vals):
        if self.args == ("x",):
            (x,) = vals
            t = 0.0
            y = z = 0.0
        else:
            t, x, y, z = vals
        x = _as_rows(x, self.n)
        m = x.shape[0]
        env = {"t": t, "y": np.broadcast_to(np.asarray(y, float), (m,)),
               "z": np.broadcast_to(np.asarray(z, float), (m,))}
        for j in range(self.n):
            env[f"x{j + 1}"] = x[:, j]
        return np.broadcast_to(self.expr.evaluate(env), (m,)).astype(float)

    def depends_on(self, name):
        return self.expr.depends_on(name)


@dataclass(frozen=True)
class CoefficientSet:
    """The six problem functions with declared Lipschitz data.

    Shapes (m evaluation points): ``b, h, sigma(t, x[m,n], y[m]) -> [m,n]``,
    ``f, g(t, x[m,n], y[m], z[m]) -> [m]``, ``phi(x[m,n]) -> [m]``.
    """

    n: int
    b: Callable
    h: Callable
    sigma: Callable
    f: Callable
    g: Callable
    phi: Callable
    L1: float
    L2: float
    L3: float
    sigma_depends_on_y: bool = True
    source: Optional[dict] = field(default=None, compare=False)

    @classmethod
    def from_strings(cls, n, *, b, h, sigma, f, g, phi, L1, L2, L3, sigma_depends_on_y=None):
        """Build from expression strings; vector components are separated by ';'."""
        xs = [f"x{j + 1}" for j in range(n)]
        vec_vars = ["t", *xs, "y"]
        sca_vars = ["t", *xs, "y", "z"]
        src = {"b": b, "h": h, "sigma": sigma, "f": f, "g": g, "phi": phi}
        vecs = {}
        for name in ("b", "h", "sigma"):
            parts = [s for s in str(src[name]).split(";")]
            if len(parts) == 1 and n > 1:
                parts = parts * n
            if len(parts) != n:
                raise ExpressionError(f"{name} needs {n} ';'-separated components, got {len(parts)}")
            vecs[name] = _VectorExpr([Expression(s, vec_vars) for s in parts], n)
        fe = _ScalarExpr(Expression(str(f), sca_vars), n, ("t", "x", "y", "z"))
        ge = _ScalarExpr(Expression(str(g), sca_vars), n, ("t", "x", "y", "z"))
        pe = _ScalarExpr(Expression(str(phi), xs), n, ("x",))
        if sigma_depends_on_y is None:
            sigma_depends_on_y = vecs["sigma"].depends_on("y")
        return cls(n, vecs["b"], vecs["h"], vecs["sigma"], fe, ge, pe,
                   float(L1), float(L2), float(L3), bool(sigma_depends_on_y),
                   source={k: str(v) for k, v in src.items()})

    def with_phi(self, phi: Callable, L3: Optional[float] = None, source: Optional[str] = None):
        src = dict(self.source or {})
        if source is not None:
            src["phi"] = source
        return CoefficientSet(self.n, self.b, self.h, self.sigma, self.f, self.g, phi, self.L1, self.L2,
                              self.L3 if L3 is None else float(L3), self.sigma_depends_on_y, src or None)

    def to_dict(self) -> dict:
        d = {"L1": self.L1, "L2": self.L2, "L3": self.L3, "sigma_depends_on_y": self.sigma_depends_on_y}
        if self.source:
            d["expressions"] = dict(self.source)
        return d


@dataclass(frozen=True)
class DiscretizationGrid:
    """Time steps plus a uniform tensor lattice in state space."""

    n_steps: int
    dt: float
    space_min: tuple
    space_max: tuple
    n_space: tuple
    quadrature: str = "two-point"

    def __post_init__(self):
        if self.n_steps < 1:
            raise InvalidProblem("n_steps must be >= 1")
        if self.quadrature not in QUADRATURES:
            raise InvalidProblem(f"unknown quadrature '{self.quadrature}' (use one of {QUADRATURES})")
        if any(k < 2 for k in self.n_space):
            raise InvalidProblem("need at least two lattice nodes per coordinate")

    @classmethod
    def build(cls, setting: GSetting, n_steps: int, *, space_step: Optional[float] = None,
              nodes_per_step: Optional[int] = None, width: float = 6.0, scale: float = 1.0, center=None,
              quadrature="two-point", max_nodes: int = 20001):
        """Uniform lattice on ``center +- width*sigma_high*sqrt(T)*scale``.

        Default spacing is ``sigma_high*scale*sqrt(dt)/k`` with
        ``k = max(8, ceil(2*dt**-0.5))``: the top-volatility two-point move is a
        whole number of cells and the spacing is at most ``sigma_high*dt/2``, so
        summed interpolation error over all steps stays O(dt). The centre (x0
        unless given) is always a node.
        """
        n_steps = int(n_steps)
        if n_steps < 1:
            raise InvalidProblem("n_steps must be >= 1")
        dt = setting.T / n_steps
        lo, hi = setting.working_box(width, scale, center)
        c = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        if space_step is None:
            k_step = nodes_per_step or max(8, math.ceil(2 * dt ** -0.5 - 1e-9))
            space_step = setting.sigma_high * scale * math.sqrt(dt) / k_step
            cells = np.ceil(half / space_step - 1e-9).astype(int)
            k = np.maximum(cells, 1)
            if np.all(2 * k + 1 <= max_nodes):
                return cls(n_steps, dt, tuple(c - k * space_step), tuple(c + k * space_step),
                           tuple(int(2 * v + 1) for v in k), quadrature)
        k = np.maximum(np.ceil(half / space_step), 1).astype(int)
        k = np.minimum(k, (max_nodes - 1) // 2)
        h = half / k
        return cls(n_steps, dt, tuple(c - k * h), tuple(c + k * h), tuple(int(2 * v + 1) for v in k), quadrature)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.n_steps * self.dt, self.n_steps + 1)

    def axis(self, j: int = 0) -> np.ndarray:
        return np.linspace(self.space_min[j], self.space_max[j], self.n_space[j])

    @property
    def axes(self):
        return [self.axis(j) for j in range(len(self.n_space))]

    def nodes(self) -> np.ndarray:
        """All lattice nodes as an (M, n) array in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def shape(self):
        return tuple(self.n_space)

    def to_dict(self) -> dict:
        return {"n_steps": self.n_steps, "dt": self.dt, "space_min": list(self.space_min),
                "space_max": list(self.space_max), "n_space": list(self.n_space), "quadrature": self.quadrature}


@dataclass(frozen=True)
class ProblemCatalogEntry:
    name: str
    setting: GSetting
    coefficients: CoefficientSet
    analytic_reference: Optional[dict] = None
    description: str = ""
    partner: Optional[str] = None


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)
    witness: Optional[dict] = None

    def add(self, name, passed, detail=""):
        self.checks.append({"check": name, "passed": bool(passed), "detail": detail})

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c["passed"]]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": self.checks, "witness": self.witness}


def _sample_pairs(rng, lo, hi, n, m, yz_scale):
    """Half global pairs on the box, half local perturbations of size ~1e-3."""
    span = hi - lo
    x = lo + span * rng.random((m, n))
    y = yz_scale * (2 * rng.random(m) - 1)
    z = yz_scale * (2 * rng.random(m) - 1)
    t = rng.random(m)
    x2 = lo + span * rng.random((m, n))
    y2 = yz_scale * (2 * rng.random(m) - 1)
    z2 = yz_scale * (2 * rng.random(m) - 1)
    half = m // 2
    eps = 1e-3 * np.concatenate([span, [yz_scale]]).max()
    x2[:half] = np.clip(x[:half] + eps * rng.standard_normal((half, n)), lo, hi)
    y2[:half] = y[:half] + eps * rng.standard_normal(half)
    z2[:half] = z[:half] + eps * rng.standard_normal(half)
    return t, x, y, z, x2, y2, z2


def validate_problem(setting: GSetting, coeffs: CoefficientSet, *, samples: int = 10_000, seed: int = 0,
                     rtol: float = 1e-9, yz_scale: Optional[float] = None, box=None) -> ValidationReport:
    """Check invariants and audit the declared (H2) constants on random pairs.

    Each pair (t, x, y, z), (t, x', y', z') shares t. The audit fails when a
    grouped difference exceeds its bound by more than ``rtol`` relative (a
    1e-12 absolute floor absorbs rounding when both sides vanish). Non-finite
    evaluations are rejected with the offending point.
    """
    rep = ValidationReport()
    rep.add("setting", True, "band, exponents and horizon valid")
    rep.add("dimension", coeffs.n == setting.n, f"coefficients n={coeffs.n}, setting n={setting.n}")
    if coeffs.n != setting.n:
        return rep
    consts_ok = all(np.isfinite(v) and v >= 0 for v in (coeffs.L1, coeffs.L2, coeffs.L3))
    rep.add("lipschitz_constants", consts_ok, f"L1={coeffs.L1}, L2={coeffs.L2}, L3={coeffs.L3}")
    lo, hi = box if box is not None else setting.working_box()
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    if yz_scale is None:
        yz_scale = float(np.max(np.abs(np.concatenate([lo, hi])))) + 1.0
    rng = np.random.default_rng(seed)
    n = setting.n
    t, x, y, z, x2, y2, z2 = _sample_pairs(rng, lo, hi, n, samples, yz_scale)
    t = t * setting.T

    vals = {}
    for name in ("b", "h", "sigma"):
        fn = getattr(coeffs, name)
        vals[name] = (fn(t, x, y), fn(t, x2, y2))
    for name in ("f", "g"):
        fn = getattr(coeffs, name)
        vals[name] = (fn(t, x, y, z), fn(t, x2, y2, z2))
    vals["phi"] = (coeffs.phi(x), coeffs.phi(x2))

    for name, (a, b2) in vals.items():
        bad = ~(np.isfinite(a).all(axis=-1) if a.ndim > 1 else np.isfinite(a))
        if bad.any():
            i = int(np.argmax(bad))
            pt = {"t": float(t[i]), "x": x[i].tolist(), "y": float(y[i]), "z": float(z[i])}
            rep.add("finite", False, f"{name} is not finite at {pt}")
            rep.witness = {"function": name, "point": pt}
            return rep
        bad = ~(np.isfinite(b2).all(axis=-1) if b2.ndim > 1 else np.isfinite(b2))
        if bad.any():
            i = int(np.argmax(bad))
            pt = {"t": float(t[i]), "x": x2[i].tolist(), "y": float(y2[i]), "z": float(z2[i])}
            rep.add("finite", False, f"{name} is not finite at {pt}")
            rep.witness = {"function": name, "point": pt}
            return rep
    rep.add("finite", True, "all sampled evaluations finite")

    dx = np.linalg.norm(x - x2, axis=1)
    dy = np.abs(y - y2)
    dz = np.abs(z - z2)
    worst = None

    def audit(label, lhs, rhs):
        nonlocal worst
        excess = lhs - rhs * (1 + rtol) - 1e-12
        i = int(np.argmax(excess))
        ok = excess[i] <= 0
        ratio = float(lhs[i] / rhs[i]) if rhs[i] > 0 else math.inf
        detail = f"max excess {float(lhs[i] - rhs[i]):.3e}"
        if not ok:
            w = {"group": label, "x": x[i].tolist(), "x_prime": x2[i].tolist(), "y": float(y[i]),
                 "y_prime": float(y2[i]), "z": float(z[i]), "z_prime": float(z2[i]), "t": float(t[i]),
                 "lhs": float(lhs[i]), "bound": float(rhs[i]), "ratio": ratio}
            if worst is None or excess[i] > worst[0]:
                worst = (excess[i], w)
        rep.add(f"lipschitz_{label}", ok, detail)

    fwd = sum(np.abs(vals[k][0] - vals[k][1]) for k in ("b", "h", "sigma"))
    audit("forward", fwd.max(axis=1), coeffs.L1 * dx + coeffs.L2 * dy)
    bwd = np.abs(vals["f"][0] - vals["f"][1]) + np.abs(vals["g"][0] - vals["g"][1])
    audit("driver", bwd, coeffs.L3 * dx + coeffs.L1 * (dy + dz))
    audit("terminal", np.abs(vals["phi"][0] - vals["phi"][1]), coeffs.L3 * dx)
    if worst is not None:
        rep.witness = worst[1]

    if not coeffs.sigma_depends_on_y:
        s1 = coeffs.sigma(t, x, y)
        s2 = coeffs.sigma(t, x, y2)
        same = np.array_equal(s1, s2)
        rep.add("sigma_independent_of_y", same,
                "sigma identical across y" if same else "sigma changes with y but flag says it does not")
    return rep


# ---------------------------------------------------------------- problem files

_SETTING_KEYS = {"sigma_low", "sigma_high", "p", "beta", "n", "t", "x0", "classical_reduction"}
_COEF_KEYS = {"b", "h", "sigma", "f", "g", "phi", "l1", "l2", "l3", "sigma_depends_on_y"}
_GRID_KEYS = {"n_steps", "quadrature", "space_step", "width", "n_paths"}
_COMPARISON_KEYS = {"phi", "l3", "x0"}


def _key_positions(text):
    """Map (section, key) -> (line, column of value start)."""
    pos = {}
    section = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip().lower()
            continue
        for sep in ("=", ":"):
            if sep in raw:
                k, _, rest = raw.partition(sep)
                col = len(k) + 2 + (len(rest) - len(rest.lstrip()))
                pos[(section, k.strip().lower())] = (ln, col)
                break
    return pos


def _bool(val, where):
    v = val.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise InvalidProblem(f"expected a boolean, got '{val}'", *where)


def _float(val, where):
    try:
        return float(val)
    except ValueError:
        raise InvalidProblem(f"expected a number, got '{val}'", *where) from None


def parse_problem(text: str, name: str = "<problem>") -> dict:
    """Parse an INI problem file.

    Returns a dict with ``setting``, ``coefficients``, ``grid`` (plain dict of
    options) and optionally ``comparison`` (a second CoefficientSet differing
    in phi, plus its initial state).
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read_string(text, source=name)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise InvalidProblem(f"malformed problem file: {exc.message if hasattr(exc, 'message') else exc}",
                             line, 1) from None
    pos = _key_positions(text)

    def where(sec, key):
        return pos.get((sec, key), (None, None))

    allowed = {"setting": _SETTING_KEYS, "coefficients": _COEF_KEYS, "grid": _GRID_KEYS,
               "comparison": _COMPARISON_KEYS}
    for sec in cp.sections():
        if sec not in allowed:
            raise InvalidProblem(f"unknown section [{sec}]")
        for key in cp[sec]:
            if key not in allowed[sec]:
                raise InvalidProblem(f"unknown key '{key}' in [{sec}]", *where(sec, key))
    for sec in ("setting", "coefficients"):
        if sec not in cp:
            raise InvalidProblem(f"missing section [{sec}]")

    s = cp["setting"]
    for key in ("sigma_low", "sigma_high", "p", "beta", "t", "x0"):
        if key not in s:
            raise InvalidProblem(f"[setting] is missing '{key}'")
    n = int(_float(s.get("n", "1"), where("setting", "n")))
    x0 = [_float(v, where("setting", "x0")) for v in s["x0"].replace(";", ",").split(",") if v.strip()]
    setting = GSetting(
        sigma_low=_float(s["sigma_low"], where("setting", "sigma_low")),
        sigma_high=_float(s["sigma_high"], where("setting", "sigma_high")),
        p=_float(s["p"], where("setting", "p")),
        beta=_float(s["beta"], where("setting", "beta")),
        n=n,
        T=_float(s["t"], where("setting", "t")),
        x0=tuple(x0),
        classical=_bool(s.get("classical_reduction", "false"), where("setting", "classical_reduction")),
    )

    c = cp["coefficients"]
    for key in ("b", "h", "sigma", "f", "g", "phi", "l1", "l2", "l3"):
        if key not in c:
            raise InvalidProblem(f"[coefficients] is missing '{key}'")

    def build(csec, phi_src, l3_val, phi_sec="coefficients"):
        try:
            coeffs = CoefficientSet.from_strings(
                n, b=csec["b"], h=csec["h"], sigma=csec["sigma"], f=csec["f"], g=csec["g"], phi=phi_src,
                L1=_float(csec["l1"], where("coefficients", "l1")),
                L2=_float(csec["l2"], where("coefficients", "l2")),
                L3=l3_val,
                sigma_depends_on_y=(_bool(csec["sigma_depends_on_y"], where("coefficients", "sigma_depends_on_y"))
                                    if "sigma_depends_on_y" in csec else None),
            )
        except ExpressionError as exc:
            # locate which key failed by re-parsing each one
            for key in ("b", "h", "sigma", "f", "g", "phi"):
                sec_name = phi_sec if key == "phi" else "coefficients"
                src = phi_src if key == "phi" else csec[key]
                ln, col = where(sec_name, key)
                offset = 0
                for part in str(src).split(";"):
                    try:
                        Expression(part, ["t", *[f"x{j + 1}" for j in range(n)], "y", "z"])
                    except ExpressionError as inner:
                        line = (ln or 1) + inner.line - 1
                        column = (col or 1) + offset + inner.column - 1
                        raise InvalidProblem(f"in '{key}': {inner.message}", line, column) from None
                    offset += len(part) + 1
            raise InvalidProblem(str(exc)) from None
        return coeffs

    coeffs = build(c, c["phi"], _float(c["l3"], where("coefficients", "l3")))
    out = {"setting": setting, "coefficients": coeffs, "grid": {}}
    if "grid" in cp:
        g = cp["grid"]
        grid = {}
        if "n_steps" in g:
            grid["n_steps"] = int(_float(g["n_steps"], where("grid", "n_steps")))
        if "n_paths" in g:
            grid["n_paths"] = int(_float(g["n_paths"], where("grid", "n_paths")))
        if "space_step" in g:
            grid["space_step"] = _float(g["space_step"], where("grid", "space_step"))
        if "width" in g:
            grid["width"] = _float(g["width"], where("grid", "width"))
        if "quadrature" in g:
            q = g["quadrature"].strip()
            if q not in QUADRATURES:
                raise InvalidProblem(f"unknown quadrature '{q}'", *where("grid", "quadrature"))
            grid["quadrature"] = q
        out["grid"] = grid
    if "comparison" in cp:
        cmp_ = cp["comparison"]
        phi2 = cmp_.get("phi", c["phi"])
        l3 = _float(cmp_.get("l3", c["l3"]), where("comparison", "l3"))
        coeffs2 = build(c, phi2, l3, phi_sec="comparison")
        x0b = setting.x0
        if "x0" in cmp_:
            x0b = tuple(_float(v, where("comparison", "x0")) for v in cmp_["x0"].replace(";", ",").split(",")
                        if v.strip())
        out["comparison"] = {"coefficients": coeffs2, "x0": x0b}
    return out


def load_problem(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    out = parse_problem(text, str(path))
    out["config_hash"] = hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
    return out


def catalog():
    """Built-in problems (see :mod:`gfbsde.catalog`)."""
    from .catalog import entries

    return entries()


def catalog_entry(name: str) -> ProblemCatalogEntry:
    for e in catalog():
        if e.name == name:
            return e
    raise KeyError(f"no catalog entry named '{name}'")
