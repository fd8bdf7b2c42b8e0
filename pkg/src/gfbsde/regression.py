"""Least-squares polynomial regression used for path-wise conditional expectations."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

__all__ = ["PolyFit", "poly_features", "fit_poly"]


def poly_features(u: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of total degree <= ``degree`` in the columns of u (m, d)."""
    u = np.atleast_2d(u)
    m, d = u.shape
    cols = [np.ones(m)]
    for k in range(1, degree + 1):
        for combo in combinations_with_replacement(range(d), k):
            c = np.ones(m)
            for j in combo:
                c = c * u[:, j]
            cols.append(c)
    return np.stack(cols, axis=1)


@dataclass
class PolyFit:
    """Polynomial in standardised inputs; columns with no spread are dropped."""

    center: np.ndarray
    scale: np.ndarray
    active: np.ndarray
    degree: int
    coef: np.ndarray
    rms: float

    def features(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        u = (x[:, self.active] - self.center) / self.scale
        return poly_features(u, self.degree)

    def __call__(self, x):
        return self.features(x) @ self.coef


def fit_poly(x: np.ndarray, y: np.ndarray, degree: int = 3, weights: np.ndarray | None = None,
             tiny: float = 1e-12) -> PolyFit:
    """Least squares of y on monomials of the standardised inputs.

    Inputs whose spread is below ``tiny`` carry no information and are
    dropped, so a cloud collapsed to one point yields a constant fit.
    """
    x = np.atleast_2d(np.asarray(x, float))
    if x.shape[0] != len(y) and x.shape[1] == len(y):
        x = x.T
    center = x.mean(axis=0)
    spread = x.std(axis=0)
    active = spread > tiny * (1 + np.abs(center))
    deg = degree if active.any() else 0
    c = center[active]
    s = spread[active] if active.any() else np.ones(0)
    u = (x[:, active] - c) / s if active.any() else np.zeros((x.shape[0], 0))
    A = poly_features(u, deg) if active.any() else np.ones((x.shape[0], 1))
    if weights is not None:
        A = A * weights[:, None]
    coef, *_ = np.linalg.lstsq(A, y if weights is None else y * weights, rcond=None)
    if weights is not None:
        A = A / weights[:, None]
    resid = y - A @ coef
    return PolyFit(c, s, active, deg, coef, float(np.sqrt(np.mean(resid ** 2))))
