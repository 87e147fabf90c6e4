"""Planar Gaussian field with covariance exp(-|dy|^alpha) * min(t1, t2).

Two sampling routes share the same second-order structure:

* :func:`sample_field` draws the Gaussian field by factorizing the grid
  covariance matrix.
* :func:`sample_product_field` draws ``zeta(y) * w(t)`` where ``zeta`` is a
  stationary Gaussian process in ``y`` and ``w`` a standard Wiener path.
  It has the same covariance but is not Gaussian.

Nodes are flattened row-major with the y-index fastest:
``index = j * ny + i`` for node ``(y_i, t_j)``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from pathlib import Path

import numpy as np

from ._linalg import factorize
from .errors import InputError
from .rng import as_generator

MAGIC = b"SILTFLD1"
_LAYOUTS = ("midpoint", "left")


@dataclass(frozen=True)
class GridSpec:
    """Rectangular node grid on ``y_range x t_range``.

    ``layout="midpoint"`` puts nodes at cell centres (midpoint quadrature);
    ``layout="left"`` puts them at lower-left cell corners, which contains the
    lattice ``(k1/n, 1 + k2/n)`` whenever ``n`` divides the node counts.
    """

    ny: int = 20
    nt: int = 20
    y_range: tuple[float, float] = (0.0, 1.0)
    t_range: tuple[float, float] = (1.0, 2.0)
    layout: str = "midpoint"

    def __post_init__(self):
        if int(self.ny) < 2 or int(self.nt) < 2:
            raise InputError(f"grid needs ny, nt >= 2, got {self.ny}x{self.nt}")
        (y0, y1), (t0, t1) = self.y_range, self.t_range
        if not (y1 > y0 and t1 > t0):
            raise InputError("grid ranges must be increasing intervals")
        if self.layout not in _LAYOUTS:
            raise InputError(f"layout must be one of {_LAYOUTS}")
        object.__setattr__(self, "y_range", (float(y0), float(y1)))
        object.__setattr__(self, "t_range", (float(t0), float(t1)))

    @property
    def size(self) -> int:
        return self.ny * self.nt

    @property
    def area(self) -> float:
        (y0, y1), (t0, t1) = self.y_range, self.t_range
        return (y1 - y0) * (t1 - t0)

    @property
    def cell_volume(self) -> float:
        return self.area / self.size

    def _axis(self, lo: float, hi: float, n: int) -> np.ndarray:
        shift = 0.5 if self.layout == "midpoint" else 0.0
        return lo + (np.arange(n) + shift) * (hi - lo) / n

    @property
    def y_nodes(self) -> np.ndarray:
        return self._axis(*self.y_range, self.ny)

    @property
    def t_nodes(self) -> np.ndarray:
        return self._axis(*self.t_range, self.nt)

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(ny*nt, 2)`` as ``(y, t)`` rows."""
        yy, tt = np.meshgrid(self.y_nodes, self.t_nodes, indexing="xy")
        return np.column_stack([yy.ravel(), tt.ravel()])

    def index(self, i: int, j: int) -> int:
        return j * self.ny + i


@dataclass(frozen=True)
class CovarianceSpec:
    alpha: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.alpha <= 2.0):
            raise InputError(f"alpha must lie in (0, 2], got {self.alpha}")


@dataclass
class FieldSample:
    grid: GridSpec
    values: np.ndarray  # shape (2, ny*nt): rows are eta_1, eta_2
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (2, self.grid.size):
            raise InputError(
                f"values must have shape (2, {self.grid.size}), got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InputError("field values must be finite")

    @property
    def points(self) -> np.ndarray:
        """Field values as planar points, shape ``(ny*nt, 2)``."""
        return self.values.T

    def to_bytes(self) -> bytes:
        g = self.grid
        header = json.dumps(
            {
                "ny": g.ny,
                "nt": g.nt,
                "y_range": list(g.y_range),
                "t_range": list(g.t_range),
                "layout": g.layout,
                "meta": self.meta,
            },
            sort_keys=True,
        ).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        buf.write(self.values.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FieldSample":
        if data[:8] != MAGIC:
            raise InputError("not a SILTFLD1 field block")
        (hlen,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12 : 12 + hlen])
        grid = GridSpec(
            header["ny"],
            header["nt"],
            tuple(header["y_range"]),
            tuple(header["t_range"]),
            header["layout"],
        )
        vals = np.frombuffer(data[12 + hlen :], dtype="<f8").reshape(2, grid.size)
        return cls(grid, vals.copy(), header.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FieldSample":
        return cls.from_bytes(Path(path).read_bytes())


def _check_point(u, name: str) -> tuple[float, float]:
    y, t = float(u[0]), float(u[1])
    if not (0.0 <= y <= 1.0 and 1.0 <= t <= 2.0):
        raise InputError(f"{name}=({y}, {t}) lies outside D=[0,1]x[1,2]")
    return y, t


def covariance(u1, u2, spec: CovarianceSpec) -> float:
    """``exp(-|y2 - y1|**alpha) * min(t1, t2)`` for points of D."""
    y1, t1 = _check_point(u1, "u1")
    y2, t2 = _check_point(u2, "u2")
    return float(np.exp(-abs(y2 - y1) ** spec.alpha) * min(t1, t2))


def kernel_matrix(p: np.ndarray, q: np.ndarray, alpha: float) -> np.ndarray:
    """Covariance between two node sets (no domain checks)."""
    dy = np.abs(p[:, None, 0] - q[None, :, 0])
    return np.exp(-(dy**alpha)) * np.minimum(p[:, None, 1], q[None, :, 1])


def covariance_matrix(grid: GridSpec, spec: CovarianceSpec) -> np.ndarray:
    pts = grid.points()
    m = kernel_matrix(pts, pts, spec.alpha)
    return 0.5 * (m + m.T)


@lru_cache(maxsize=32)
def _field_factor(grid: GridSpec, spec: CovarianceSpec):
    return factorize(covariance_matrix(grid, spec))


@lru_cache(maxsize=32)
def _zeta_factor(grid: GridSpec, alpha: float):
    y = grid.y_nodes
    cov = np.exp(-(np.abs(y[:, None] - y[None, :]) ** alpha))
    return factorize(cov)


def sample_field_values(grid: GridSpec, spec: CovarianceSpec, rng, size: int) -> np.ndarray:
    """``size`` independent field draws, shape ``(size, 2, ny*nt)``."""
    fac = _field_factor(grid, spec)
    g1, g2 = as_generator(rng).spawn(2)
    n = grid.size
    out = np.empty((size, 2, n))
    out[:, 0] = g1.standard_normal((size, n)) @ fac.lower.T
    out[:, 1] = g2.standard_normal((size, n)) @ fac.lower.T
    return out


def sample_field(grid: GridSpec, spec: CovarianceSpec, rng) -> FieldSample:
    """One Gaussian field sample; coordinates come from independent sub-streams."""
    vals = sample_field_values(grid, spec, rng, 1)[0]
    fac = _field_factor(grid, spec)
    return FieldSample(grid, vals, {"alpha": spec.alpha, "jitter": fac.jitter, "kind": "gaussian"})


def sample_product_field_values(
    grid: GridSpec, spec: CovarianceSpec, rng, size: int
) -> np.ndarray:
    """``size`` draws of ``zeta(y) * w(t)`` per coordinate, shape ``(size, 2, ny*nt)``."""
    zfac = _zeta_factor(grid, spec.alpha)
    t = grid.t_nodes
    if t[0] < 0:
        raise InputError("product field needs nonnegative t-nodes")
    dt = np.diff(np.concatenate([[0.0], t]))
    out = np.empty((size, 2, grid.size))
    for c, g in enumerate(as_generator(rng).spawn(2)):
        gz, gw = g.spawn(2)
        zeta = gz.standard_normal((size, grid.ny)) @ zfac.lower.T
        w = np.cumsum(gw.standard_normal((size, grid.nt)) * np.sqrt(dt), axis=1)
        # y fastest: value[j*ny + i] = zeta[i] * w[j]
        out[:, c] = (w[:, :, None] * zeta[:, None, :]).reshape(size, -1)
    return out


def sample_product_field(grid: GridSpec, spec: CovarianceSpec, rng) -> FieldSample:
    vals = sample_product_field_values(grid, spec, rng, 1)[0]
    fac = _zeta_factor(grid, spec.alpha)
    return FieldSample(grid, vals, {"alpha": spec.alpha, "jitter": fac.jitter, "kind": "product"})


def _jackknife_cov(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    n = x.shape[0]
    est = float(np.cov(x, y, ddof=1)[0, 1])
    sx, sy, sxy = x.sum(), y.sum(), (x * y).sum()
    m = n - 1
    mx = (sx - x) / m
    my = (sy - y) / m
    loo = (sxy - x * y - m * mx * my) / (m - 1) if m > 1 else np.zeros(n)
    se = float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    return est, se


def empirical_covariance(samples, pairs, coord: int = 0) -> list[tuple[float, float]]:
    """Unbiased covariance per node pair with its jackknife standard error.

    ``samples`` is a list of :class:`FieldSample` or an array of shape
    ``(n_samples, ny*nt)`` / ``(n_samples, 2, ny*nt)``.
    """
    if isinstance(samples, np.ndarray):
        arr = samples[:, coord] if samples.ndim == 3 else samples
    else:
        arr = np.array([s.values[coord] for s in samples])
    if arr.shape[0] < 2:
        raise InputError("empirical_covariance needs at least 2 samples")
    n_nodes = arr.shape[1]
    out = []
    for i, j in pairs:
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise InputError(f"node pair ({i}, {j}) out of range")
        out.append(_jackknife_cov(arr[:, i], arr[:, j]))
    return out
