"""Explicit constants of the stability estimates and the weak-coupling certificate.

Every function takes an optional ``cp`` argument overriding the BDG constant:
either a number or a callable ``p -> C(p)``. The default is ``(10 p)^(p/2)``.

Large constants are carried in log space. ``c1_patch`` in particular grows
like ``4^(p T / delta0)`` and overflows a double long before the product
``Lambda_p`` does when L2*L3 is small, so products are formed from logs.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

__all__ = [
    "DomainError",
    "UNBOUNDED",
    "bdg_constant",
    "default_bdg",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "lambda5",
    "solve_delta0",
    "c1_patch",
    "log_c1_patch",
    "c1_gronwall",
    "log_c1_gronwall",
    "c1",
    "log_c1",
    "c2",
    "log_c2",
    "lambda_p",
    "lambda_tilde_p",
    "coupling_threshold",
    "log_coupling_threshold",
    "find_p_prime",
    "ConstantsReport",
    "CertificateReport",
    "constants_report",
    "certify",
    "make_cp",
    "EXISTS_UNIQUE_P_GE2",
    "EXISTS_UNIQUE_P_LT2",
    "NOT_CERTIFIED",
]

EXISTS_UNIQUE_P_GE2 = "EXISTS_UNIQUE_P_GE2"
EXISTS_UNIQUE_P_LT2 = "EXISTS_UNIQUE_P_LT2"
NOT_CERTIFIED = "NOT_CERTIFIED"

UNBOUNDED = math.inf
"""Sentinel returned by :func:`solve_delta0` when L1 = 0."""

CP = Union[None, float, Callable[[float], float]]


class DomainError(ValueError):
    pass


def default_bdg(p: float) -> float:
    return (10.0 * p) ** (p / 2.0)


def make_cp(spec: Optional[str]):
    """Turn a ``--cp-formula`` string (expression in p) into a callable."""
    if spec is None:
        return None
    from .expr import Expression

    e = Expression(spec, ["p"])
    return lambda p: float(e.evaluate({"p": float(p)}))


def bdg_constant(p: float, cp: CP = None) -> float:
    if not p > 1:
        raise DomainError(f"BDG constant needs p > 1 (got {p})")
    if cp is None:
        val = default_bdg(p)
    elif callable(cp):
        val = float(cp(p))
    else:
        val = float(cp)
    if not (np.isfinite(val) and val > 0):
        raise DomainError(f"C(p) must be positive and finite (got {val})")
    return val


def lambda1(delta: float, p: float, n: int, L1: float, sigma_high: float, cp: CP = None) -> float:
    if delta < 0:
        raise DomainError("delta must be nonnegative")
    C = bdg_constant(p, cp)
    return 8.0 ** (p - 1) * ((1 + sigma_high ** (2 * p)) * (n * L1 * delta) ** p
                             + 2 * C * (L1 * n * n * sigma_high) ** p * delta ** (p / 2))


def lambda2(p: float, n: int, sigma_high: float, cp: CP = None) -> float:
    C = bdg_constant(p, cp)
    return 8.0 ** (p - 1) * (1 + sigma_high ** (2 * p) + 2 * C * (n * sigma_high) ** p)


def lambda3(p: float, T: float, n: int, L1: float, sigma_high: float, cp: CP = None) -> float:
    C = bdg_constant(p, cp)
    return 6.0 ** (p - 1) * ((1 + sigma_high ** (2 * p)) * (n * L1) ** p * T ** (p - 1)
                             + 2 * C * (L1 * n * n * sigma_high) ** p * T ** ((p - 2) / 2))


def lambda4(p: float, n: int, sigma_high: float, cp: CP = None) -> float:
    C = bdg_constant(p, cp)
    return 6.0 ** (p - 1) * (1 + sigma_high ** (2 * p) + 2 * C * (n * sigma_high) ** p)


def lambda5(p: float, L1: float, sigma_high: float, sigma_low: float) -> float:
    if not sigma_low > 0:
        raise DomainError("sigma_low must be positive")
    return (p * L1 * (1 + sigma_high ** 2)
            + 0.5 * p * L1 ** 2 * sigma_high ** 2 * (1 + sigma_low ** -2) ** 2 * max(1.0 / (p - 1), 1.0))


@functools.lru_cache(maxsize=4096)
def solve_delta0(p: float, n: int, L1: float, sigma_high: float, cp: CP = None,
                 target: float = 0.75) -> float:
    """Root of lambda1(delta) = 0.75 by bisection; ``UNBOUNDED`` when L1 = 0."""
    bdg_constant(p, cp)
    if L1 == 0:
        return UNBOUNDED
    lo, hi = 0.0, 1.0
    while lambda1(hi, p, n, L1, sigma_high, cp) < target:
        lo, hi = hi, 2 * hi
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if lambda1(mid, p, n, L1, sigma_high, cp) < target:
            lo = mid
        else:
            hi = mid
    r_lo = abs(lambda1(lo, p, n, L1, sigma_high, cp) - target)
    r_hi = abs(lambda1(hi, p, n, L1, sigma_high, cp) - target)
    return lo if r_lo <= r_hi else hi


def _logsubexp(a: float, b: float) -> float:
    """log(e^a - e^b) for a >= b."""
    if b == -math.inf:
        return a
    return a + math.log1p(-math.exp(b - a))


def log_c1_patch(p: float, T: float, n: int, L1: float, sigma_high: float, cp: CP = None) -> float:
    if not p > 1:
        raise DomainError(f"c1_patch needs p > 1 (got {p})")
    d0 = solve_delta0(p, n, L1, sigma_high, cp)
    if d0 == UNBOUNDED:
        d0 = T
    l2 = lambda2(p, n, sigma_high, cp)
    ln4 = math.log(4.0)
    q = 4.0 ** p - 1
    r = T / d0
    # bracket = (4^{p(r+2)} - 4^p)/q - r, positive since 4^{p(r+2)} - 4^p >= 4^p (4^p - 1)(...)
    a = p * (r + 2) * ln4
    log_num = _logsubexp(a, p * ln4) - math.log(q)
    log_bracket = _logsubexp(log_num, math.log(r)) if r > 0 else log_num
    return math.log(4 * l2 / q) + log_bracket


def c1_patch(p: float, T: float, n: int, L1: float, sigma_high: float, cp: CP = None) -> float:
    """Small-time patching constant; +inf when it overflows a double."""
    lv = log_c1_patch(p, T, n, L1, sigma_high, cp)
    return math.exp(lv) if lv < 709.0 else math.inf


def log_c1_gronwall(p: float, T: float, n: int, L1: float, sigma_high: float, cp: CP = None) -> float:
    if p < 2:
        raise DomainError(f"the Gronwall variant of C1 needs p >= 2 (got {p})")
    return lambda3(p, T, n, L1, sigma_high, cp) * T + math.log(lambda4(p, n, sigma_high, cp))


def c1_gronwall(p: float, T: float, n: int, L1: float, sigma_high: float, cp: CP = None) -> float:
    lv = log_c1_gronwall(p, T, n, L1, sigma_high, cp)
    return math.exp(lv) if lv < 709.0 else math.inf


def log_c1(p, T, n, L1, sigma_high, cp=None) -> float:
    """Log of the C1 used downstream: min over the variants defined at p."""
    lv = log_c1_patch(p, T, n, L1, sigma_high, cp)
    if p >= 2:
        lv = min(lv, log_c1_gronwall(p, T, n, L1, sigma_high, cp))
    return lv


def c1(p, T, n, L1, sigma_high, cp=None) -> float:
    lv = log_c1(p, T, n, L1, sigma_high, cp)
    return math.exp(lv) if lv < 709.0 else math.inf


def log_c2(p: float, T: float, L1: float, sigma_high: float, sigma_low: float) -> float:
    if not p > 1:
        raise DomainError(f"c2 needs p > 1 (got {p})")
    if not sigma_low > 0:
        raise DomainError("c2 needs sigma_low > 0")
    s2 = 1 + sigma_high ** 2
    inner = p * math.log(s2) + p * L1 * s2 * T  # log of (1+hi^2)^p e^{p L1 (1+hi^2) T}
    log_bracket = inner + math.log1p(math.exp(-inner)) if inner > 0 else math.log1p(math.exp(inner))
    return (p - 1) * math.log(2.0) + log_bracket + lambda5(p, L1, sigma_high, sigma_low) * T


def c2(p: float, T: float, L1: float, sigma_high: float, sigma_low: float) -> float:
    lv = log_c2(p, T, L1, sigma_high, sigma_low)
    return math.exp(lv) if lv < 709.0 else math.inf


def _log_time_factor(p, T, tilde):
    if T <= 0:
        return -math.inf
    lt = p * math.log(T)
    if not tilde:
        lt = np.logaddexp(lt, 0.5 * p * math.log(T))
    return float(lt + p * math.log1p(T))


def _log_lambda(p, T, n, L1, L2, L3, sigma_high, sigma_low, cp, tilde):
    if L2 * L3 == 0 or T <= 0:
        return -math.inf
    return (log_c1(p, T, n, L1, sigma_high, cp) + log_c2(p, T, L1, sigma_high, sigma_low)
            + p * math.log(n * L2 * L3) + _log_time_factor(p, T, tilde))


def _exp(lv):
    if lv == -math.inf:
        return 0.0
    return math.exp(lv) if lv < 709.0 else math.inf


def lambda_p(p, T, n, L1, L2, L3, sigma_high, sigma_low, cp=None) -> float:
    """C1 C2 (n L2 L3)^p (T^p + T^(p/2)) (1+T)^p."""
    return _exp(_log_lambda(p, T, n, L1, L2, L3, sigma_high, sigma_low, cp, False))


def lambda_tilde_p(p, T, n, L1, L2, L3, sigma_high, sigma_low, cp=None) -> float:
    """C1 C2 (n L2 L3)^p T^p (1+T)^p."""
    return _exp(_log_lambda(p, T, n, L1, L2, L3, sigma_high, sigma_low, cp, True))


def log_coupling_threshold(p, T, n, L1, sigma_high, sigma_low, cp=None, tilde: bool = False) -> float:
    """log of :func:`coupling_threshold`; finite even when the threshold underflows."""
    if T <= 0:
        return math.inf
    lk = log_c1(p, T, n, L1, sigma_high, cp) + log_c2(p, T, L1, sigma_high, sigma_low) + _log_time_factor(p, T, tilde)
    return -lk / p - math.log(n)


def coupling_threshold(p, T, n, L1, sigma_high, sigma_low, cp=None, tilde: bool = False) -> float:
    """The value of L2*L3 at which Lambda_p (or the tilde variant) equals one."""
    return math.exp(log_coupling_threshold(p, T, n, L1, sigma_high, sigma_low, cp, tilde))


def find_p_prime(p, beta, T, n, L1, L2, L3, sigma_high, sigma_low, cp=None, n_grid: int = 64,
                 tilde: bool = False) -> Optional[float]:
    """Largest of ``n_grid`` equispaced points strictly inside (p, beta) with Lambda < 1."""
    lam = lambda_tilde_p if tilde else lambda_p
    if not lam(p, T, n, L1, L2, L3, sigma_high, sigma_low, cp) < 1:
        raise DomainError("find_p_prime needs Lambda_p < 1")
    best = None
    for k in range(1, n_grid + 1):
        q = p + (beta - p) * k / (n_grid + 1)
        if lam(q, T, n, L1, L2, L3, sigma_high, sigma_low, cp) < 1:
            best = q
    return best


@dataclass
class ConstantsReport:
    p: float
    bdg_c: float
    lambda1_at: Callable = field(repr=False)
    lambda2: float
    lambda3: Optional[float]
    lambda4: float
    lambda5: float
    delta0: float
    c1_patch: float
    c1_gronwall: Optional[float]
    c1: float
    c2: float
    lambda_p: float
    lambda_tilde_p: float
    delta_threshold: float
    delta_threshold_tilde: float
    p_prime: Optional[float]
    log_c1: float = 0.0
    log_c2: float = 0.0
    cp_formula: str = "(10*p)^(p/2)"

    def to_dict(self) -> dict:
        d0 = self.delta0
        out = {
            "p": self.p,
            "bdg_c": self.bdg_c,
            "cp_formula": self.cp_formula,
            "lambda1_at_delta0": None if d0 == UNBOUNDED else self.lambda1_at(d0),
            "lambda2": self.lambda2,
            "lambda3": self.lambda3,
            "lambda4": self.lambda4,
            "lambda5": self.lambda5,
            "delta0": "unbounded" if d0 == UNBOUNDED else d0,
            "c1_patch": self.c1_patch,
            "c1_gronwall": self.c1_gronwall,
            "c1": self.c1,
            "log_c1": self.log_c1,
            "c2": self.c2,
            "log_c2": self.log_c2,
            "lambda_p": self.lambda_p,
            "lambda_tilde_p": self.lambda_tilde_p,
            "delta_threshold": self.delta_threshold,
            "delta_threshold_tilde": self.delta_threshold_tilde,
            "p_prime": self.p_prime,
        }
        return {k: (v if not (isinstance(v, float) and math.isinf(v)) else "inf") for k, v in out.items()}


def constants_report(setting, coeffs, cp: CP = None, cp_formula: Optional[str] = None) -> ConstantsReport:
    p, T, n = setting.p, setting.T, setting.n
    hi, lo = setting.sigma_high, setting.sigma_low
    L1, L2, L3 = coeffs.L1, coeffs.L2, coeffs.L3
    lam = lambda_p(p, T, n, L1, L2, L3, hi, lo, cp)
    lam_t = lambda_tilde_p(p, T, n, L1, L2, L3, hi, lo, cp)
    use_tilde = p < 2
    p_prime = None
    if (lam_t if use_tilde else lam) < 1:
        p_prime = find_p_prime(p, setting.beta, T, n, L1, L2, L3, hi, lo, cp, tilde=use_tilde)
    return ConstantsReport(
        p=p,
        bdg_c=bdg_constant(p, cp),
        lambda1_at=lambda d: lambda1(d, p, n, L1, hi, cp),
        lambda2=lambda2(p, n, hi, cp),
        lambda3=lambda3(p, T, n, L1, hi, cp) if p >= 2 else None,
        lambda4=lambda4(p, n, hi, cp),
        lambda5=lambda5(p, L1, hi, lo),
        delta0=solve_delta0(p, n, L1, hi, cp),
        c1_patch=c1_patch(p, T, n, L1, hi, cp),
        c1_gronwall=c1_gronwall(p, T, n, L1, hi, cp) if p >= 2 else None,
        c1=c1(p, T, n, L1, hi, cp),
        c2=c2(p, T, L1, hi, lo),
        lambda_p=lam,
        lambda_tilde_p=lam_t,
        delta_threshold=coupling_threshold(p, T, n, L1, hi, lo, cp),
        delta_threshold_tilde=coupling_threshold(p, T, n, L1, hi, lo, cp, tilde=True),
        p_prime=p_prime,
        log_c1=log_c1(p, T, n, L1, hi, cp),
        log_c2=log_c2(p, T, L1, hi, lo),
        cp_formula=cp_formula or ("(10*p)^(p/2)" if cp is None else "override"),
    )


@dataclass
class CertificateReport:
    verdict: str
    constants: ConstantsReport
    reasons: list

    @property
    def certified(self) -> bool:
        return self.verdict != NOT_CERTIFIED

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "reasons": list(self.reasons), "constants": self.constants.to_dict()}


def certify(setting, coeffs, cp: CP = None, cp_formula: Optional[str] = None) -> CertificateReport:
    """Existence/uniqueness verdict from the sufficient contraction conditions.

    NOT_CERTIFIED only means the sufficient condition failed; it does not
    assert that a solution fails to exist.
    """
    rep = constants_report(setting, coeffs, cp, cp_formula)
    p, beta = setting.p, setting.beta
    reasons = []
    if p >= 2:
        if beta <= 2:
            reasons.append("beta <= 2")
        if not rep.lambda_p < 1:
            reasons.append(f"Lambda_p = {rep.lambda_p:.6g} >= 1")
        verdict = EXISTS_UNIQUE_P_GE2 if not reasons else NOT_CERTIFIED
    else:
        if coeffs.sigma_depends_on_y:
            reasons.append("p < 2 requires sigma independent of y")
        if not rep.lambda_tilde_p < 1:
            reasons.append(f"Lambda~_p = {rep.lambda_tilde_p:.6g} >= 1")
        verdict = EXISTS_UNIQUE_P_LT2 if not reasons else NOT_CERTIFIED
    if not reasons:
        reasons.append("contraction condition holds")
    return CertificateReport(verdict, rep, reasons)
