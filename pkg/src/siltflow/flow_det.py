"""Deterministic equations with interaction ``dx = a(x, mu_t) dt``.

``mu_t`` is the pushforward of the initial measure by the flow, so an atom
discretization is advanced by moving every atom with the drift evaluated
against the current (frozen within a step) measure.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import expm
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import coo_matrix

from .errors import InputError, NumericalError
from .field import FieldSample
from .measure import EmpiricalMeasure

EXACT_ATOMS = 256
ASSIGNMENT_ATOMS = 2048


def _spread(measure: EmpiricalMeasure) -> float:
    """``int |v - m| / (1 + |v - m|) mu(dv)`` for a probability measure."""
    d = np.linalg.norm(measure.points - measure.mass_center(), axis=1)
    return float(measure.weights @ (d / (1 + d)) / measure.total_mass)


@dataclass(frozen=True)
class DriftSpec:
    """Drift ``a(x, mu)`` of an equation with interaction.

    kinds
      ``linear_center_of_mass``  ``A x + m(mu)``
      ``radial_from_center``     ``a (x - m(mu))``, ``a > 0``
      ``modulated_linear``       ``(A + lam s(mu) I) x + m(mu)`` with the
                                 bounded spread ``s(mu) = int |v-m|/(1+|v-m|) dmu``
      ``custom``                 user callable ``fn(x, mu)``
    """

    kind: str
    A: Optional[np.ndarray] = None
    rate: float = 0.0
    lam: float = 0.0
    fn: Optional[Callable] = dc_field(default=None, compare=False)
    trace_fn: Optional[Callable] = dc_field(default=None, compare=False)

    @classmethod
    def linear_center_of_mass(cls, A) -> "DriftSpec":
        return cls("linear_center_of_mass", A=np.asarray(A, dtype=float).reshape(2, 2))

    @classmethod
    def radial_from_center(cls, a: float) -> "DriftSpec":
        if not a > 0:
            raise InputError("radial drift rate must be positive")
        return cls("radial_from_center", rate=float(a))

    @classmethod
    def modulated_linear(cls, A, lam: float) -> "DriftSpec":
        return cls("modulated_linear", A=np.asarray(A, dtype=float).reshape(2, 2), lam=float(lam))

    @classmethod
    def custom(cls, fn, trace_fn=None) -> "DriftSpec":
        return cls("custom", fn=fn, trace_fn=trace_fn)

    def __call__(self, x: np.ndarray, mu: EmpiricalMeasure) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        if self.kind == "custom":
            return np.asarray(self.fn(x, mu), dtype=float).reshape(-1, 2)
        m = mu.mass_center()
        if self.kind == "linear_center_of_mass":
            return x @ self.A.T + m
        if self.kind == "radial_from_center":
            return self.rate * (x - m)
        if self.kind == "modulated_linear":
            return x @ self.A.T + self.lam * _spread(mu) * x + m
        raise InputError(f"unknown drift kind {self.kind!r}")

    def trace(self, x: np.ndarray, mu: EmpiricalMeasure) -> np.ndarray:
        """Trace of the spatial Jacobian of the drift at ``x``."""
        n = np.asarray(x).reshape(-1, 2).shape[0]
        if self.kind == "linear_center_of_mass":
            return np.full(n, np.trace(self.A))
        if self.kind == "radial_from_center":
            return np.full(n, 2 * self.rate)
        if self.kind == "modulated_linear":
            return np.full(n, np.trace(self.A) + 2 * self.lam * _spread(mu))
        if self.trace_fn is not None:
            return np.asarray(self.trace_fn(x, mu), dtype=float).reshape(n)
        raise InputError("custom drift has no trace function")


@dataclass(frozen=True)
class FlowConfig:
    dt: float = 1e-3
    t_end: float = 1.0
    record_every: int = 0  # 0 disables trajectory recording

    def __post_init__(self):
        if not self.dt > 0:
            raise InputError("dt must be positive")
        if self.t_end < self.dt:
            raise InputError("t_end must be at least dt")

    @property
    def steps(self) -> int:
        return int(round(self.t_end / self.dt))


def lattice_points(n: int) -> np.ndarray:
    """``(k1/n, 1 + k2/n)`` for ``0 <= k1, k2 < n``, k1 fastest."""
    k = np.arange(n) / n
    yy, tt = np.meshgrid(k, 1.0 + k, indexing="xy")
    return np.column_stack([yy.ravel(), tt.ravel()])


def discretize_occupation(field: FieldSample, n: int) -> EmpiricalMeasure:
    """``n^2`` atoms of mass ``1/n^2`` at the field values on the lattice
    ``(k1/n, 1 + k2/n)``, ``0 <= k1, k2 <= n-1``.

    Values are read directly when the grid contains the lattice and are
    bilinearly interpolated (with linear extrapolation at the border) otherwise.
    """
    g = field.grid
    if n < 1 or n > min(g.ny, g.nt):
        raise InputError(f"resolution n={n} not supported by a {g.ny}x{g.nt} grid")
    vals = field.values.reshape(2, g.nt, g.ny)
    if (
        g.layout == "left"
        and g.y_range == (0.0, 1.0)
        and g.t_range == (1.0, 2.0)
        and g.ny % n == 0
        and g.nt % n == 0
    ):
        sy, st = g.ny // n, g.nt // n
        pts = np.stack([vals[c, ::st, ::sy].ravel() for c in range(2)], axis=1)
    else:
        lat = lattice_points(n)[:, ::-1]  # interpolator wants (t, y)
        pts = np.stack(
            [
                RegularGridInterpolator(
                    (g.t_nodes, g.y_nodes), vals[c], bounds_error=False, fill_value=None
                )(lat)
                for c in range(2)
            ],
            axis=1,
        )
    return EmpiricalMeasure(pts, np.full(n * n, 1.0 / (n * n)))


def _cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))
    return d / (1 + d)


def _is_uniform(m: EmpiricalMeasure) -> bool:
    w = m.weights
    return bool(np.allclose(w, w[0], rtol=1e-12, atol=0))


def _transport_lp(C: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    n, m = C.shape
    rows = np.concatenate([np.repeat(np.arange(n), m), n + np.tile(np.arange(m), n)])
    cols = np.concatenate([np.arange(n * m), np.arange(n * m)])
    A_eq = coo_matrix((np.ones(2 * n * m), (rows, cols)), shape=(n + m, n * m)).tocsr()
    b_eq = np.concatenate([a, b * a.sum() / b.sum()])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise NumericalError(f"transport LP failed: {res.message}")
    return float(res.fun)


def _greedy_coupling(C: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Cost of a feasible coupling built by filling cheapest cells first."""
    a = a.copy()
    b = b * a.sum() / b.sum()
    left = a.sum()
    total = 0.0
    for flat in np.argsort(C, axis=None, kind="stable"):
        i, j = divmod(int(flat), C.shape[1])
        q = min(a[i], b[j])
        if q > 0:
            total += q * C[i, j]
            a[i] -= q
            b[j] -= q
            left -= q
            if left <= 1e-15:
                break
    return total


def bounded_wasserstein(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    exact_atoms: int = EXACT_ATOMS,
    assignment_atoms: int = ASSIGNMENT_ATOMS,
) -> tuple[float, bool]:
    """Optimal transport cost under ``|u-v| / (1 + |u-v|)``.

    Exact by linear programming when both measures have at most
    ``exact_atoms`` atoms, or by an assignment problem when both are uniform
    and their lifted common size is at most ``assignment_atoms``; otherwise
    the cost of a greedy feasible coupling (an upper bound) with ``exact=False``.
    """
    ma, mb = mu.total_mass, nu.total_mass
    if abs(ma - mb) > 1e-9:
        raise InputError(f"total masses differ: {ma} vs {mb}; normalize first")
    C = _cost(mu.points, nu.points)
    n, m = C.shape
    if max(n, m) <= exact_atoms:
        if n == 1 or m == 1:
            w = nu.weights if n == 1 else mu.weights
            return float(w @ C.ravel()), True
        return _transport_lp(C, mu.weights, nu.weights), True
    L = n * m // math.gcd(n, m)
    if _is_uniform(mu) and _is_uniform(nu) and L <= assignment_atoms:
        Cl = np.repeat(np.repeat(C, L // n, axis=0), L // m, axis=1)
        r, c = linear_sum_assignment(Cl)
        return float(Cl[r, c].sum() * ma / L), True
    return _greedy_coupling(C, mu.weights, nu.weights), False


def euler_interaction_step(atoms: EmpiricalMeasure, drift: DriftSpec, dt: float) -> EmpiricalMeasure:
    """Move every atom by ``drift(x, mu) * dt``; weights are carried unchanged."""
    v = drift(atoms.points, atoms)
    bad = ~np.isfinite(v).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NumericalError(f"drift is not finite at atom {i} ({atoms.points[i].tolist()})")
    return atoms.moved(atoms.points + dt * v)


@dataclass
class FlowResult:
    measure: EmpiricalMeasure
    probes: np.ndarray
    log_det: np.ndarray  # per probe, integral of the drift trace along the path
    times: list = dc_field(default_factory=list)
    trajectory: list = dc_field(default_factory=list)  # (t, points) snapshots


def integrate_flow(
    measure: EmpiricalMeasure,
    drift: DriftSpec,
    cfg: FlowConfig,
    probes=None,
    track_det: bool = True,
) -> FlowResult:
    """Explicit Euler for the measure and passive probe points.

    Probes follow ``dx = a(x, mu_t) dt`` without contributing to ``mu_t``; with
    ``track_det`` their log-Jacobian ``int tr a'(x, mu_s) ds`` is accumulated.
    """
    probes = np.zeros((0, 2)) if probes is None else np.asarray(probes, dtype=float).reshape(-1, 2)
    mu = measure
    log_det = np.zeros(len(probes))
    res = FlowResult(mu, probes, log_det)
    if cfg.record_every:
        res.times.append(0.0)
        res.trajectory.append(mu.points.copy())
    for step in range(1, cfg.steps + 1):
        if len(probes):
            if track_det:
                log_det = log_det + drift.trace(probes, mu) * cfg.dt
            probes = probes + cfg.dt * drift(probes, mu)
        mu = euler_interaction_step(mu, drift, cfg.dt)
        if cfg.record_every and step % cfg.record_every == 0:
            res.times.append(step * cfg.dt)
            res.trajectory.append(mu.points.copy())
    res.measure, res.probes, res.log_det = mu, probes, log_det
    return res


def write_trajectory_csv(path, result: FlowResult, weights: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "atom_id", "x", "y", "weight"])
        for t, pts in zip(result.times, result.trajectory):
            for i, (x, y) in enumerate(pts):
                w.writerow([f"{t:.10g}", i, repr(float(x)), repr(float(y)), repr(float(weights[i]))])


def matrix_exp(A, t: float = 1.0) -> np.ndarray:
    """``exp(A t)`` (Pade scaling-and-squaring)."""
    return expm(np.asarray(A, dtype=float) * t)


def liouville_det(A, t: float) -> float:
    """``det exp(A t) = exp(t tr A)``."""
    return float(np.exp(t * np.trace(np.asarray(A, dtype=float))))


def closed_form_linear_flow(A, m0, v, t: float) -> np.ndarray:
    """Exact flow of ``dx = (A x + m_t) dt`` started from mass centre ``m0``:
    ``exp(At) v + (e^t - 1) exp(At) m0``. ``v`` may be a batch of points."""
    B = matrix_exp(A, t)
    v = np.asarray(v, dtype=float)
    shift = (np.exp(t) - 1.0) * (B @ np.asarray(m0, dtype=float).reshape(2))
    return v @ B.T + shift
