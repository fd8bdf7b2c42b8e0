"""Straight-line second implementation of the constants, used only by tests.

Direct formulas in 60-digit mpmath arithmetic: no log-space tricks, no shared
helpers with the package. delta0 comes from mpmath's findroot, with a
plain bisection fallback.
"""

import mpmath as mp

mp.mp.dps = 60


def C(p, cp=None):
    p = mp.mpf(p)
    return (10 * p) ** (p / 2) if cp is None else mp.mpf(cp)


def lam1(d, p, n, L1, hi, cp=None):
    p, d, n, L1, hi = map(mp.mpf, (p, d, n, L1, hi))
    return 8 ** (p - 1) * ((1 + hi ** (2 * p)) * (n * L1 * d) ** p + 2 * C(p, cp) * (L1 * n ** 2 * hi) ** p * d ** (p / 2))


def lam2(p, n, hi, cp=None):
    p, n, hi = map(mp.mpf, (p, n, hi))
    return 8 ** (p - 1) * (1 + hi ** (2 * p) + 2 * C(p, cp) * (n * hi) ** p)


def lam3(p, T, n, L1, hi, cp=None):
    p, T, n, L1, hi = map(mp.mpf, (p, T, n, L1, hi))
    return 6 ** (p - 1) * ((1 + hi ** (2 * p)) * (n * L1) ** p * T ** (p - 1)
                           + 2 * C(p, cp) * (L1 * n ** 2 * hi) ** p * T ** ((p - 2) / 2))


def lam4(p, n, hi, cp=None):
    p, n, hi = map(mp.mpf, (p, n, hi))
    return 6 ** (p - 1) * (1 + hi ** (2 * p) + 2 * C(p, cp) * (n * hi) ** p)


def lam5(p, L1, hi, lo):
    p, L1, hi, lo = map(mp.mpf, (p, L1, hi, lo))
    return p * L1 * (1 + hi ** 2) + p * L1 ** 2 * hi ** 2 * (1 + lo ** -2) ** 2 * max(1 / (p - 1), mp.mpf(1)) / 2


def delta0(p, n, L1, hi, cp=None):
    if L1 == 0:
        return mp.inf
    f = lambda d: lam1(d, p, n, L1, hi, cp) - mp.mpf("0.75")
    b = mp.mpf(1)
    while f(b) < 0:
        b *= 2
    try:
        return mp.findroot(f, (mp.mpf(0), b), solver="anderson")
    except (ValueError, ZeroDivisionError):
        pass
    # steep or tiny roots defeat the residual check; lambda1 is increasing in d, so bisect
    a = mp.mpf(0)
    for _ in range(220):
        m = (a + b) / 2
        if f(m) < 0:
            a = m
        else:
            b = m
    return (a + b) / 2


def c1_patch(p, T, n, L1, hi, cp=None):
    d = delta0(p, n, L1, hi, cp)
    if d == mp.inf:
        d = mp.mpf(T)
    p, T = mp.mpf(p), mp.mpf(T)
    return 4 * lam2(p, n, hi, cp) / (4 ** p - 1) * ((4 ** (p * (T + 2 * d) / d) - 4 ** p) / (4 ** p - 1) - T / d)


def c1_gronwall(p, T, n, L1, hi, cp=None):
    return mp.e ** (lam3(p, T, n, L1, hi, cp) * mp.mpf(T)) * lam4(p, n, hi, cp)


def c1(p, T, n, L1, hi, cp=None):
    v = c1_patch(p, T, n, L1, hi, cp)
    if p >= 2:
        v = min(v, c1_gronwall(p, T, n, L1, hi, cp))
    return v


def c2(p, T, L1, hi, lo):
    p, T, L1, hi = map(mp.mpf, (p, T, L1, hi))
    return 2 ** (p - 1) * (1 + (1 + hi ** 2) ** p * mp.e ** (p * L1 * (1 + hi ** 2) * T)) * mp.e ** (lam5(p, L1, hi, lo) * T)


def Lam(p, T, n, L1, L2, L3, hi, lo, cp=None):
    pm, Tm = mp.mpf(p), mp.mpf(T)
    return (c1(p, T, n, L1, hi, cp) * c2(p, T, L1, hi, lo) * (n * mp.mpf(L2) * mp.mpf(L3)) ** pm
            * (Tm ** pm + Tm ** (pm / 2)) * (1 + Tm) ** pm)


def Lam_tilde(p, T, n, L1, L2, L3, hi, lo, cp=None):
    pm, Tm = mp.mpf(p), mp.mpf(T)
    return c1(p, T, n, L1, hi, cp) * c2(p, T, L1, hi, lo) * (n * mp.mpf(L2) * mp.mpf(L3)) ** pm * Tm ** pm * (1 + Tm) ** pm
