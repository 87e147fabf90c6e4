"""Gram determinants and Schur-complement conditional variances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import factorize
from .errors import InputError, NumericalError
from .field import CovarianceSpec, GridSpec, covariance_matrix


@dataclass(frozen=True)
class GaussianSystem:
    cov: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 1:
            raise InputError("cov must be a nonempty square matrix")
        if not np.allclose(c, c.T, rtol=0, atol=1e-12 * max(1.0, np.abs(c).max())):
            raise InputError("cov must be symmetric")
        tr = max(float(np.trace(c)), 1e-300)
        if np.linalg.eigvalsh(c)[0] < -1e-10 * tr:
            raise InputError("cov must be positive semidefinite")
        object.__setattr__(self, "cov", c)

    @property
    def n(self) -> int:
        return self.cov.shape[0]

    def _check(self, idx) -> list[int]:
        idx = [int(i) for i in idx]
        for i in idx:
            if not 0 <= i < self.n:
                raise InputError(f"index {i} out of range for {self.n} variables")
        return idx


@dataclass(frozen=True)
class VarianceFloorParams:
    K: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.K <= 0:
            raise InputError("K must be positive")
        if not 0 < self.alpha <= 2:
            raise InputError("alpha must lie in (0, 2]")


def gram_determinant(sys: GaussianSystem, subset) -> float:
    idx = sys._check(subset)
    if not idx:
        raise InputError("subset must be nonempty")
    return float(np.linalg.det(sys.cov[np.ix_(idx, idx)]))


def conditional_variance(sys: GaussianSystem, target: int, given=()) -> float:
    """``cov[t,t] - cov[t,G] cov[G,G]^{-1} cov[G,t]``, clipped at 0."""
    (t,) = sys._check([target])
    g = sys._check(given)
    if t in g:
        raise InputError("target must not be among the conditioning indices")
    c = sys.cov
    if not g:
        return float(c[t, t])
    block = c[np.ix_(g, g)]
    try:
        fac = factorize(block)
    except NumericalError as exc:
        raise NumericalError(f"singular conditioning block: {exc}") from None
    z = np.linalg.solve(fac.lower, c[g, t])
    return max(float(c[t, t] - z @ z), 0.0)


def differencing_matrix(m: int) -> np.ndarray:
    """``(m-1) x m`` matrix mapping ``e`` to ``(e_2 - e_1, ..., e_m - e_{m-1})``."""
    d = np.zeros((m - 1, m))
    r = np.arange(m - 1)
    d[r, r] = -1.0
    d[r, r + 1] = 1.0
    return d


def increment_gram(sys: GaussianSystem, order) -> float:
    idx = sys._check(order)
    if len(idx) < 2 or len(set(idx)) != len(idx):
        raise InputError("order needs at least 2 distinct indices")
    c = sys.cov[np.ix_(idx, idx)]
    m = len(idx)
    # covariance of consecutive differences, assembled entrywise
    dc = c[1:, 1:] - c[1:, :-1] - c[:-1, 1:] + c[:-1, :-1]
    if m == 2:
        return float(dc[0, 0])
    return float(np.linalg.det(dc))


def chain_bound(sys: GaussianSystem, order) -> tuple[float, float]:
    """``(G(increments), prod_j Var(e_j | e_1..e_{j-1}))`` along ``order``."""
    lhs = increment_gram(sys, order)
    idx = sys._check(order)
    rhs = 1.0
    for j in range(1, len(idx)):
        rhs *= conditional_variance(sys, idx[j], idx[:j])
    return lhs, rhs


def variance_floor(delta1: float, delta2: float, t: float, params: VarianceFloorParams) -> float:
    """``K * t * delta1**(alpha+1) + delta2 / 2``."""
    if not (0 <= delta1 < 0.5 and 0 <= delta2 < 0.5):
        raise InputError("separations must lie in [0, 1/2)")
    if not 1.0 <= t <= 2.0:
        raise InputError("t must lie in [1, 2]")
    return params.K * t * delta1 ** (params.alpha + 1) + 0.5 * delta2


def measured_floor(
    grid: GridSpec, spec: CovarianceSpec, node: int, delta1: float, delta2: float
) -> float:
    """Conditional variance of one node given all nodes separated by at least
    ``delta1`` in y and ``delta2`` in t."""
    pts = grid.points()
    r, t = pts[node]
    mask = (np.abs(pts[:, 0] - r) >= delta1) & (np.abs(pts[:, 1] - t) >= delta2)
    given = np.flatnonzero(mask)
    sys = GaussianSystem(covariance_matrix(grid, spec))
    return conditional_variance(sys, node, given)


def fit_floor_constant(grid: GridSpec, spec: CovarianceSpec, node: int, deltas) -> dict:
    """Largest ``K`` keeping the floor below every measured conditional variance.

    Returns the fitted ``K`` and the minimum of measured/floor over the sweep
    with that ``K`` (which is 1 whenever the y-term binds somewhere).
    """
    t = grid.points()[node, 1]
    rows = []
    for d1, d2 in deltas:
        v = measured_floor(grid, spec, node, d1, d2)
        rows.append((d1, d2, v))
    ks = [
        (v - 0.5 * d2) / (t * d1 ** (spec.alpha + 1))
        for d1, d2, v in rows
        if d1 > 0
    ]
    K = min(ks) if ks else np.inf
    params = VarianceFloorParams(K=K, alpha=spec.alpha) if np.isfinite(K) and K > 0 else None
    ratios = []
    if params is not None:
        for d1, d2, v in rows:
            f = variance_floor(d1, d2, t, params)
            if f > 0:
                ratios.append(f / v)
    return {"K": K, "rows": rows, "max_floor_ratio": max(ratios) if ratios else np.nan}
