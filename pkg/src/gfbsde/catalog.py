"""Built-in problems. All are one-dimensional and pass the Lipschitz audit.

Declared constants follow the (H2) grouping: for the forward coefficients the
x-slopes of b, h and sigma add up to at most L1 and their y-slopes to at most
L2; for the driver the x-slopes of f and g add up to at most L3 and the y- and
z-slopes to at most L1.
"""

from __future__ import annotations

import math

import numpy as np

from .model import CoefficientSet, GSetting, ProblemCatalogEntry

__all__ = ["entries", "linear_riccati_slope"]

def linear_riccati_slope(t, T, a, c, r, kappa):
    """Slope A(t) of Y_t = A(t) X_t for the linear classical problem

    dX = (a X + c Y) dt + dB,  dY = r Y dt + Z dB,  Y_T = kappa X_T.

    A solves A' = (r - a) A - c A^2 with A(T) = kappa; w = 1/A is linear:
    w(t) = c/k + (1/kappa - c/k) exp(k (T - t)) with k = r - a.
    """
    k = r - a
    w = c / k + (1.0 / kappa - c / k) * np.exp(k * (T - np.asarray(t, float)))
    return 1.0 / w


def _decoupled():
    s = GSetting(sigma_low=0.5, sigma_high=1.0, p=2.0, beta=3.0, n=1, T=1.0, x0=(0.5,))
    c = CoefficientSet.from_strings(
        1,
        b="-0.2*x1",
        h="0.1",
        sigma="1",
        f="-0.1*y + 0.05*tanh(z)",
        g="0.05*sin(x1) - 0.05*y",
        phi="log(1 + exp(x1))",
        L1=0.2, L2=0.0, L3=1.0,
    )
    return ProblemCatalogEntry("decoupled", s, c, description="forward equation ignores Y (L2 = 0)")


def _classical_linear():
    T, x0 = 1.0, 1.0
    a, cc, r, kappa = -0.3, 0.2, 0.1, 1.0
    s = GSetting(sigma_low=0.5, sigma_high=0.5, p=2.0, beta=3.0, n=1, T=T, x0=(x0,), classical=True)
    c = CoefficientSet.from_strings(
        1,
        b="-0.3*x1 + 0.2*y",
        h="0",
        sigma="1",
        f="0.1*y",
        g="0",
        phi="x1",
        L1=0.3, L2=0.2, L3=1.0,
    )
    A0 = float(linear_riccati_slope(0.0, T, a, cc, r, kappa))
    ref = {
        "kind": "linear-riccati",
        "params": {"a": a, "c": cc, "r": r, "kappa": kappa},
        "y0": A0 * x0,
        "slope": lambda t: linear_riccati_slope(t, T, a, cc, r, kappa),
        "note": "Y_t = A(t) X_t, Z_t = A(t), K = 0",
    }
    return ProblemCatalogEntry("classical-linear", s, c, ref,
                               description="no volatility uncertainty, affine coefficients, closed form")


def _weakly_coupled():
    s = GSetting(sigma_low=0.5, sigma_high=1.0, p=2.0, beta=3.0, n=1, T=0.5, x0=(0.0,))
    c = CoefficientSet.from_strings(
        1,
        b="-0.05*x1 + 0.05*tanh(y)",
        h="0.02*sin(x1)",
        sigma="1 + 0.03*tanh(y)",
        f="-0.05*y + 0.05*tanh(z) + 0.03*cos(x1)",
        g="0.02*z",
        phi="0.05*log(1 + exp(x1))",
        L1=0.1, L2=0.08, L3=0.05,
    )
    return ProblemCatalogEntry("weakly-coupled", s, c, description="nonlinear, L2*L3 below the p=2 threshold")


def _weakly_coupled_p15():
    s = GSetting(sigma_low=0.5, sigma_high=1.0, p=1.5, beta=3.0, n=1, T=0.5, x0=(0.0,))
    c = CoefficientSet.from_strings(
        1,
        b="-0.05*x1 + 0.05*tanh(y)",
        h="0.02*sin(x1)",
        sigma="1 + 0.03*sin(x1)",
        f="-0.05*y + 0.05*tanh(z) + 0.02*cos(x1)",
        g="0.02*z",
        phi="0.02*log(1 + exp(x1))",
        L1=0.1, L2=0.05, L3=0.02,
    )
    return ProblemCatalogEntry("weakly-coupled-p15", s, c,
                               description="p = 1.5 variant, sigma independent of y")


_MONO = dict(
    b="-0.05*x1 + 0.05*tanh(y)",
    h="0.02*cos(x1)",
    sigma="1 + 0.03*sin(x1)",
    f="-0.05*y + 0.03*tanh(z) - 0.03*tanh(x1)",
    g="0.02*z - 0.02*tanh(x1)",
    phi="0.05*log(1 + exp(2*x1))",
    L1=0.1, L2=0.05, L3=0.1,
)


def _monotone_pair():
    s1 = GSetting(sigma_low=0.5, sigma_high=1.0, p=2.0, beta=3.0, n=1, T=0.5, x0=(0.5,))
    s2 = GSetting(sigma_low=0.5, sigma_high=1.0, p=2.0, beta=3.0, n=1, T=0.5, x0=(-0.5,))
    c = CoefficientSet.from_strings(1, **_MONO)
    note = "phi non-decreasing, f and g non-increasing in x"
    return [
        ProblemCatalogEntry("monotone-pair", s1, c, description=f"upper member (x0 = 0.5); {note}",
                            partner="monotone-pair-low"),
        ProblemCatalogEntry("monotone-pair-low", s2, c, description=f"lower member (x0 = -0.5); {note}",
                            partner="monotone-pair"),
    ]


def _convex_terminal():
    s = GSetting(sigma_low=0.5, sigma_high=1.0, p=2.0, beta=3.0, n=1, T=1.0, x0=(0.0,))
    # x^2 is Lipschitz only on a box: L3 is its slope bound on the working box x0 +- 6 hi sqrt(T)
    half = 6.0 * s.sigma_high * math.sqrt(s.T)
    c = CoefficientSet.from_strings(1, b="0", h="0", sigma="1", f="0", g="0", phi="x1^2",
                                    L1=0.0, L2=0.0, L3=2.0 * half)
    ref = {"kind": "g-heat", "y0": s.sigma_high ** 2 * s.T, "note": "Y_t = X_t^2 + hi^2 (T - t), Z = 2 X, "
           "K = <B> - hi^2 t"}
    return ProblemCatalogEntry("convex-terminal", s, c, ref, description="Y_T = X_T^2 with f = g = 0")


def _shift_pair():
    s = GSetting(sigma_low=0.5, sigma_high=1.0, p=2.0, beta=3.0, n=1, T=0.5, x0=(0.0,))
    base = dict(_MONO)
    c2 = CoefficientSet.from_strings(1, **base)
    up = dict(base, phi=base["phi"] + " + 0.2 + 0.02*tanh(x1)", L3=0.12)
    c1 = CoefficientSet.from_strings(1, **up)
    return [
        ProblemCatalogEntry("shift-pair", s, c1, description="phi1 = phi2 + 0.2 + 0.02 tanh(x) >= phi2",
                            partner="shift-pair-low"),
        ProblemCatalogEntry("shift-pair-low", s, c2, description="lower terminal function",
                            partner="shift-pair"),
    ]


def entries():
    out = [_decoupled(), _classical_linear(), _weakly_coupled(), _weakly_coupled_p15()]
    out += _monotone_pair()
    out.append(_convex_terminal())
    out += _shift_pair()
    return out
