"""Self-intersection local time (SILT) estimators of multiplicity k.

The full-grid estimator is the midpoint Riemann sum over ordered k-tuples of
grid nodes

    sum_{u_1..u_k} rho(eta(u_1)) * prod_i f_eps(eta(u_{i+1}) - eta(u_i)) * dV**k

evaluated as a chain of matrix-vector products with the N x N kernel matrix,
so the cost is O(k N^2) even though it sums N**k terms.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import BudgetError, InputError, NumericalError
from .field import FieldSample
from .measure import EmpiricalMeasure
from .rng import as_generator

DEFAULT_TUPLE_BUDGET = 10**7

Weight = Union[float, np.ndarray, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class SiltConfig:
    k: int = 2
    epsilon: float = 0.01
    scheme: str = "full"  # "full" or "mc"
    draws: int = 100_000
    tuple_budget: int = DEFAULT_TUPLE_BUDGET

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 2:
            raise InputError("k must be an integer >= 2")
        if not self.epsilon > 0:
            raise InputError("epsilon must be positive")
        if self.scheme not in ("full", "mc"):
            raise InputError("scheme must be 'full' or 'mc'")
        if self.scheme == "mc" and self.draws < 1:
            raise InputError("monte-carlo scheme needs draws >= 1")


@dataclass(frozen=True)
class Bins:
    """Rectangular partition of a bounding box in the plane."""

    x_edges: np.ndarray
    y_edges: np.ndarray

    @classmethod
    def regular(cls, lo, hi, nx: int, ny: int | None = None) -> "Bins":
        ny = nx if ny is None else ny
        return cls(np.linspace(lo[0], hi[0], nx + 1), np.linspace(lo[1], hi[1], ny + 1))

    @classmethod
    def covering(cls, points: np.ndarray, n: int, pad: float = 1e-9) -> "Bins":
        """``n x n`` square-celled bins covering ``points``."""
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        side = float(max(hi - lo)) * (1 + 2 * pad) + 1e-12
        mid = 0.5 * (lo + hi)
        return cls.regular(mid - side / 2, mid + side / 2, n)

    @property
    def width(self) -> float:
        return float(min(np.diff(self.x_edges).min(), np.diff(self.y_edges).min()))

    def refined(self) -> "Bins":
        def half(e):
            mids = 0.5 * (e[1:] + e[:-1])
            return np.sort(np.concatenate([e, mids]))

        return Bins(half(self.x_edges), half(self.y_edges))

    def locate(self, pts: np.ndarray) -> np.ndarray:
        ix = np.searchsorted(self.x_edges, pts[:, 0], side="right") - 1
        iy = np.searchsorted(self.y_edges, pts[:, 1], side="right") - 1
        nx, ny = len(self.x_edges) - 1, len(self.y_edges) - 1
        # right-closed last bin
        ix = np.where(pts[:, 0] == self.x_edges[-1], nx - 1, ix)
        iy = np.where(pts[:, 1] == self.y_edges[-1], ny - 1, iy)
        bad = (ix < 0) | (ix >= nx) | (iy < 0) | (iy >= ny)
        if bad.any():
            raise InputError(f"bounding box misses values: {pts[bad][:5].tolist()}")
        return iy * nx + ix

    def centers(self) -> np.ndarray:
        cx = 0.5 * (self.x_edges[1:] + self.x_edges[:-1])
        cy = 0.5 * (self.y_edges[1:] + self.y_edges[:-1])
        xx, yy = np.meshgrid(cx, cy, indexing="xy")
        return np.column_stack([xx.ravel(), yy.ravel()])


def gauss_kernel(z, epsilon: float):
    """``exp(-|z|^2 / (2 eps)) / (2 pi eps)``; ``z`` has trailing axis of length 2."""
    if not epsilon > 0:
        raise InputError("epsilon must be positive")
    z = np.asarray(z, dtype=float)
    r2 = np.sum(z * z, axis=-1)
    return np.exp(-r2 / (2 * epsilon)) / (2 * np.pi * epsilon)


def kernel_matrix(points: np.ndarray, epsilon: float) -> np.ndarray:
    """``F[i, j] = f_eps(points[j] - points[i])``."""
    sq = np.sum(points**2, axis=1)
    r2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.maximum(r2, 0.0, out=r2)
    return np.exp(-r2 / (2 * epsilon)) / (2 * np.pi * epsilon)


def _weights_at(weight: Weight, pts: np.ndarray) -> np.ndarray:
    n = pts.shape[0]
    if callable(weight):
        w = np.asarray(weight(pts), dtype=float).reshape(-1)
        if w.shape[0] == 1:
            w = np.full(n, w[0])
    else:
        w = np.asarray(weight, dtype=float)
        w = np.full(n, float(w)) if w.ndim == 0 else w.reshape(-1)
    if w.shape[0] != n:
        raise InputError(f"weight has {w.shape[0]} values for {n} nodes")
    if not np.isfinite(w).all():
        raise NumericalError("weight is not finite on the sampled range")
    return w


def chain_contributions(points: np.ndarray, k: int, epsilon: float, dv: float) -> np.ndarray:
    """Per-``u_1`` contributions ``dV^k * (F^{k-1} 1)[u_1]`` of the unweighted sum."""
    F = kernel_matrix(points, epsilon)
    v = np.ones(points.shape[0])
    for _ in range(k - 1):
        v = F @ v
    return v * dv**k


def _check_budget(n: int, cfg: SiltConfig) -> None:
    if float(n) ** cfg.k > cfg.tuple_budget:
        raise BudgetError(
            f"{n}^{cfg.k} tuples exceed the budget {cfg.tuple_budget:.3g}; "
            "use scheme='mc'"
        )


def silt_estimate(
    field: FieldSample, cfg: SiltConfig, weight: Weight = 1.0, rng=None
) -> tuple[float, float | None]:
    """SILT estimate and its standard error (``None`` for the full-grid sum).

    ``weight`` is a constant, an array of per-node values, or a callable on
    planar points evaluated at ``eta(u_1)``.
    """
    pts = field.points
    n = pts.shape[0]
    if n < 2:
        raise InputError("field grid needs at least 2 nodes")
    w = _weights_at(weight, pts)
    dv = field.grid.cell_volume
    if cfg.scheme == "full":
        _check_budget(n, cfg)
        if not w.any():
            return 0.0, None
        return float(w @ chain_contributions(pts, cfg.k, cfg.epsilon, dv)), None
    gen = as_generator(rng)
    m = cfg.draws
    # stratified first node, uniform remaining nodes
    u1 = (gen.integers(n) + np.arange(m)) % n
    idx = [u1] + [gen.integers(0, n, size=m) for _ in range(cfg.k - 1)]
    vals = w[u1].copy()
    for a, b in zip(idx[:-1], idx[1:]):
        vals *= gauss_kernel(pts[b] - pts[a], cfg.epsilon)
    vol = field.grid.area ** cfg.k
    est = float(vals.mean() * vol)
    se = float(vals.std(ddof=1) * vol / np.sqrt(m)) if m > 1 else float("nan")
    return est, se


def diffeo_kernel(v, epsilon: float, F_inv, detF) -> float:
    """Delta-family kernel adapted to a diffeomorphism ``F``.

    ``|det F'(F^{-1}(v_1))|^{-(k-1)} * prod_i f_eps(F^{-1}(v_{i+1}) - F^{-1}(v_i))``
    """
    v = np.asarray(v, dtype=float).reshape(-1, 2)
    k = v.shape[0]
    back = np.asarray(F_inv(v), dtype=float).reshape(-1, 2)
    d = float(np.ravel(detF(back[:1]))[0])
    if d == 0:
        raise NumericalError("Jacobian determinant vanishes at F^{-1}(v_1)")
    return float(abs(d) ** -(k - 1) * np.prod(gauss_kernel(np.diff(back, axis=0), epsilon)))


def image_silt(field: FieldSample, cfg: SiltConfig, F, F_inv, detF) -> float:
    """Full-grid SILT of the transformed field ``F(eta)`` using :func:`diffeo_kernel`'s family."""
    pts = field.points
    _check_budget(pts.shape[0], cfg)
    v = np.asarray(F(pts), dtype=float)
    back = np.asarray(F_inv(v), dtype=float)
    det = np.abs(np.asarray(detF(back), dtype=float).reshape(-1))
    if det.shape[0] == 1:
        det = np.full(pts.shape[0], det[0])
    if (det == 0).any():
        raise NumericalError("Jacobian determinant vanishes on the field range")
    contrib = chain_contributions(back, cfg.k, cfg.epsilon, field.grid.cell_volume)
    return float(det ** -(cfg.k - 1) @ contrib)


def affine_image_silt(field: FieldSample, A, b, cfg: SiltConfig) -> tuple[float, float]:
    """Both sides of the affine change-of-variables identity for ``F(x) = A x + b``.

    ``lhs`` is the SILT of ``A eta + b`` built from the transformed values and
    the diffeomorphism-adapted kernel; ``rhs`` is the plain estimator with
    constant weight ``|det A|^{-(k-1)}``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).reshape(2)
    det = float(np.linalg.det(A))
    if det == 0 or not np.isfinite(det):
        raise InputError("A must be nonsingular")
    Ainv = np.linalg.inv(A)
    lhs = image_silt(
        field,
        cfg,
        F=lambda x: x @ A.T + b,
        F_inv=lambda v: (v - b) @ Ainv.T,
        detF=lambda x: np.full(len(x), det),
    )
    rhs, _ = silt_estimate(field, cfg, abs(det) ** -(cfg.k - 1))
    return lhs, rhs


def self_intersection_measure(
    field: FieldSample, cfg: SiltConfig, bins: Bins
) -> EmpiricalMeasure:
    """Atoms at bin centres carrying the unweighted SILT sum grouped by ``eta(u_1)``."""
    pts = field.points
    _check_budget(pts.shape[0], cfg)
    which = bins.locate(pts)
    contrib = chain_contributions(pts, cfg.k, cfg.epsilon, field.grid.cell_volume)
    nb = (len(bins.x_edges) - 1) * (len(bins.y_edges) - 1)
    mass = np.bincount(which, weights=contrib, minlength=nb)
    keep = np.flatnonzero(np.bincount(which, minlength=nb))
    return EmpiricalMeasure(bins.centers()[keep], mass[keep])


def log_energy(measure: EmpiricalMeasure, distance_floor: float) -> float:
    """``sum_ij w_i w_j ln+(1 / max(|u_i - u_j|, floor))``, diagonal included."""
    if not distance_floor > 0:
        raise InputError("distance_floor must be positive")
    p, w = measure.points, measure.weights
    d = np.sqrt(np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=-1))
    lp = np.maximum(-np.log(np.maximum(d, distance_floor)), 0.0)
    return float(w @ lp @ w)
