"""Isotropic Brownian flows driven by a Wiener sheet through a radial mollifier.

A particle moves by ``dx = a (x - m_t) dt + int phi_eps(x - p) W(dp, dt)`` with
``phi_eps(u) = phi(u / eps) / eps`` and ``m_t`` the mass centre of the carrier
particles.  The Wiener sheet is discretized per time step as independent
``N(0, h^2 dt)`` 2-vectors on square cells of side ``h = eps / 4``; the cell
lattice is shifted by a fresh uniform offset every step.  Besides positions
the grid scheme tracks ``L = log det x'(u, t)``:

    dL = eps^-2 sum_c grad phi((x - p_c)/eps) . dW_c - c/(2 eps^2) dt + trace dt

where ``trace`` is ``a`` (``mode="paper"``) or ``2a`` (``mode="liouville"``).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field, replace
from functools import lru_cache

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline

from ._linalg import factorize
from .errors import InputError, NumericalError
from .rng import as_generator

MODES = ("paper", "liouville")
CELLS_PER_EPS = 4


def _bump(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    m = r < 1.0
    out[m] = np.exp(-1.0 / (1.0 - r[m] ** 2))
    return out


def _dbump(r):
    """Radial derivative of the unnormalized bump."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    m = r < 1.0
    rm = r[m]
    out[m] = np.exp(-1.0 / (1.0 - rm**2)) * (-2.0 * rm / (1.0 - rm**2) ** 2)
    return out


@dataclass(frozen=True)
class Mollifier:
    """Radial bump ``phi(u) = C exp(-1/(1-|u|^2))`` on the unit disk.

    ``C`` normalizes ``int phi^2 = 1``; ``c = int |grad phi|^2`` is the gradient
    energy.  ``conv`` and ``grad_conv`` are radial spline tables (argument in
    units of the support radius, on ``[0, 2]``) of ``phi * phi`` and of
    ``int grad phi(s + q) . grad phi(q) dq``.
    """

    C: float
    c: float
    conv: CubicSpline = dc_field(repr=False, compare=False)
    grad_conv: CubicSpline = dc_field(repr=False, compare=False)
    support_radius: float = 1.0

    def phi(self, r):
        return self.C * _bump(r)

    def dphi(self, r):
        return self.C * _dbump(r)


def _radial_quad(f, limit=400, tol=1e-13) -> float:
    val, err = quad(lambda r: f(r) * r, 0.0, 1.0, limit=limit, epsabs=tol, epsrel=tol)
    if not np.isfinite(val) or err > 1e-9 * max(1.0, abs(val)):
        raise NumericalError(f"radial quadrature did not converge (err={err:.2e})")
    return 2.0 * np.pi * val


def _conv_tables(C: float, n_r: int = 160, n_th: int = 192, n_s: int = 401):
    """Polar Gauss-Legendre x trapezoid quadrature over the unit disk."""
    x, w = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * (x + 1.0)
    wr = 0.5 * w * r
    th = 2 * np.pi * np.arange(n_th) / n_th
    qx = (r[:, None] * np.cos(th)[None, :]).ravel()
    qy = (r[:, None] * np.sin(th)[None, :]).ravel()
    wq = (wr[:, None] * np.full(n_th, 2 * np.pi / n_th)[None, :]).ravel()
    rq = np.hypot(qx, qy)
    phi_q = C * _bump(rq)
    dphi_q = C * _dbump(rq)
    gq = np.stack([dphi_q * qx / rq, dphi_q * qy / rq])
    s_grid = np.linspace(0.0, 2.0, n_s)
    conv = np.empty(n_s)
    gconv = np.empty(n_s)
    for i, s in enumerate(s_grid):
        zx = qx + s
        rz = np.hypot(zx, qy)
        conv[i] = np.sum(wq * phi_q * C * _bump(rz))
        dz = C * _dbump(rz)
        with np.errstate(invalid="ignore", divide="ignore"):
            gx = np.where(rz > 0, dz * zx / rz, 0.0)
            gy = np.where(rz > 0, dz * qy / rz, 0.0)
        gconv[i] = np.sum(wq * (gx * gq[0] + gy * gq[1]))
    conv[-1] = gconv[-1] = 0.0
    conv /= conv[0]  # int phi^2 = 1 holds exactly at the knot, so coincident particles stay coalesced
    return CubicSpline(s_grid, conv), CubicSpline(s_grid, gconv)


@lru_cache(maxsize=1)
def make_mollifier() -> Mollifier:
    norm = _radial_quad(lambda r: _bump(np.array(r)) ** 2)
    C = 1.0 / np.sqrt(norm)
    c = _radial_quad(lambda r: (C * _dbump(np.array(r))) ** 2)
    if not c > 0:
        raise NumericalError("gradient energy must be positive")
    conv, gconv = _conv_tables(C)
    return Mollifier(C=float(C), c=float(c), conv=conv, grad_conv=gconv)


def _radial_eval(spline: CubicSpline, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    m = s < 2.0
    out[m] = spline(s[m])
    return out


def correlation_kernel(r, eps: float, mol: Mollifier | None = None):
    """``(phi_eps * phi_eps)(r)``; equals 1 at 0 and vanishes for ``|r| >= 2 eps``."""
    if not eps > 0:
        raise InputError("eps must be positive")
    mol = mol or make_mollifier()
    r = np.asarray(r, dtype=float)
    dist = np.linalg.norm(r, axis=-1) if r.ndim and r.shape[-1] == 2 else np.abs(r)
    return _radial_eval(mol.conv, dist / eps)


def gradient_correlation(r, eps: float, mol: Mollifier | None = None):
    """Covariation rate of two log-Jacobian martingales at separation ``r``:
    ``eps^-2 * int grad phi(s e_1 + q) . grad phi(q) dq`` with ``s = |r| / eps``."""
    mol = mol or make_mollifier()
    r = np.asarray(r, dtype=float)
    dist = np.linalg.norm(r, axis=-1) if r.ndim and r.shape[-1] == 2 else np.abs(r)
    return _radial_eval(mol.grad_conv, dist / eps) / eps**2


@dataclass
class NoiseGrid:
    """One time step of Wiener-sheet increments on square cells.

    Cell ``(i, j)`` has centre ``origin + ((i + 1/2) h, (j + 1/2) h)`` and
    carries ``increments[i, j] ~ N(0, h^2 dt I_2)``.
    """

    origin: np.ndarray
    h: float
    dt: float
    increments: np.ndarray  # (nx, ny, 2)

    @property
    def shape(self) -> tuple[int, int]:
        return self.increments.shape[:2]

    def covers(self, lo: np.ndarray, hi: np.ndarray) -> bool:
        top = self.origin + np.array(self.shape) * self.h
        return bool(np.all(lo >= self.origin) and np.all(hi <= top))


def make_noise(lo, hi, h: float, dt: float, rng, zero: bool = False) -> NoiseGrid:
    """Noise on a randomly shifted cell lattice covering the box ``[lo, hi]``."""
    gen = as_generator(rng)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    shift = gen.random(2) * h
    origin = np.floor(lo / h) * h - shift
    shape = np.ceil((hi - origin) / h).astype(int) + 1
    if zero:
        inc = np.zeros((shape[0], shape[1], 2))
    else:
        inc = gen.standard_normal((shape[0], shape[1], 2)) * (h * np.sqrt(dt))
    return NoiseGrid(origin, float(h), float(dt), inc)


@dataclass
class ParticleSystem:
    positions: np.ndarray  # (n, 2)
    logdets: np.ndarray  # (n,)
    origins: np.ndarray  # (n, 2)
    eps: float
    drift_rate: float = 0.0
    mass: np.ndarray | None = None  # weights defining the mass centre; None: uniform
    t: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        n = len(self.positions)
        self.logdets = np.asarray(self.logdets, dtype=float).reshape(n)
        self.origins = np.asarray(self.origins, dtype=float).reshape(n, 2)
        if not self.eps > 0:
            raise InputError("interaction radius eps must be positive")
        if self.drift_rate < 0:
            raise InputError("drift_rate must be nonnegative")
        if self.mass is not None:
            self.mass = np.asarray(self.mass, dtype=float).reshape(n)

    @classmethod
    def start(cls, points, eps: float, drift_rate: float = 0.0, mass=None) -> "ParticleSystem":
        pts = np.array(points, dtype=float).reshape(-1, 2)
        return cls(pts.copy(), np.zeros(len(pts)), pts.copy(), eps, drift_rate, mass)

    def __len__(self) -> int:
        return len(self.positions)

    def center(self) -> np.ndarray:
        if self.mass is None:
            return self.positions.mean(axis=0)
        tot = self.mass.sum()
        if tot <= 0:
            raise InputError("carrier mass must be positive to define the mass centre")
        return self.mass @ self.positions / tot

    def noise_box(self, h: float) -> tuple[np.ndarray, np.ndarray]:
        margin = 2 * self.eps + 2 * h
        return self.positions.min(axis=0) - margin, self.positions.max(axis=0) + margin


def _drift(sys: ParticleSystem, center) -> np.ndarray:
    if sys.drift_rate == 0:
        return np.zeros_like(sys.positions)
    m = sys.center() if center is None else np.asarray(center, dtype=float)
    return sys.drift_rate * (sys.positions - m)


def _stencil(x, origin, increments, h: float, eps: float, mol: Mollifier):
    """Batched cell gather.  ``x`` is ``(R, n, 2)``, ``origin`` ``(R, 2)`` and
    ``increments`` ``(R, nx, ny, 2)``; returns ``(disp (R, n, 2), div (R, n))``."""
    s = int(np.ceil(eps / h - 1e-12))
    offs = np.arange(-s, s + 1)
    base = np.floor((x - origin[:, None, :]) / h).astype(np.int64)
    ix = base[..., 0:1] + offs  # (R, n, S)
    iy = base[..., 1:2] + offs
    nx, ny = increments.shape[1:3]
    if ix.min() < 0 or iy.min() < 0 or ix.max() >= nx or iy.max() >= ny:
        raise InputError("particles violate the noise-box margin")
    px = origin[:, None, None, 0] + (ix + 0.5) * h
    py = origin[:, None, None, 1] + (iy + 0.5) * h
    dx = ((x[..., 0:1] - px) / eps)[..., :, None]  # (R, n, S, 1)
    dy = ((x[..., 1:2] - py) / eps)[..., None, :]  # (R, n, 1, S)
    r = np.sqrt(dx * dx + dy * dy)
    rid = np.arange(x.shape[0])[:, None, None, None]
    dW = increments[rid, ix[..., :, None], iy[..., None, :]]  # (R, n, S, S, 2)
    inside = r < 1.0
    rr = np.where(inside, r, 0.0)
    q = 1.0 - rr * rr
    bump = np.where(inside, np.exp(-1.0 / q), 0.0) * mol.C
    disp = np.einsum("rnab,rnabk->rnk", bump, dW) / eps
    # grad phi(z) = phi(z) * (-2 z / (1 - |z|^2)^2)
    g = np.where(inside, -2.0 * bump / (q * q), 0.0)
    div = np.einsum("rnab,rnab->rn", g * dx, dW[..., 0]) + np.einsum(
        "rnab,rnab->rn", g * dy, dW[..., 1]
    )
    return disp, div


def stencil_sums(x: np.ndarray, noise: NoiseGrid, eps: float, mol: Mollifier):
    """``sum_c phi_eps(x - p_c) dW_c`` and ``sum_c grad phi((x - p_c)/eps) . dW_c``
    for every row of ``x`` (only cells inside the support contribute)."""
    disp, div = _stencil(
        x[None], noise.origin[None], noise.increments[None], noise.h, eps, mol
    )
    return disp[0], div[0]


def drift_trace(a: float, mode: str) -> float:
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}")
    return a if mode == "paper" else 2.0 * a


def flow_step_grid(
    sys: ParticleSystem,
    noise: NoiseGrid,
    dt: float,
    mode: str = "liouville",
    mol: Mollifier | None = None,
    center=None,
) -> ParticleSystem:
    """One Euler-Maruyama step of positions and log-Jacobians under grid noise.

    ``center`` overrides the mass centre (used when replaying a recorded path
    for passive probe particles).
    """
    mol = mol or make_mollifier()
    tr = drift_trace(sys.drift_rate, mode)
    if abs(noise.dt - dt) > 1e-15 * max(1.0, dt):
        raise InputError("noise grid was generated for a different dt")
    lo, hi = sys.positions.min(axis=0) - sys.eps, sys.positions.max(axis=0) + sys.eps
    if not noise.covers(lo, hi):
        raise InputError("noise box does not cover particles plus margin")
    disp, div = stencil_sums(sys.positions, noise, sys.eps, mol)
    eps2 = sys.eps**2
    new_pos = sys.positions + _drift(sys, center) * dt + disp
    new_L = sys.logdets + div / eps2 + (tr - mol.c / (2 * eps2)) * dt
    return replace(sys, positions=new_pos, logdets=new_L, t=sys.t + dt)


def flow_step_cov(
    sys: ParticleSystem, dt: float, rng, mol: Mollifier | None = None
) -> ParticleSystem:
    """Jointly Gaussian step with ``Cov(dx_i^l, dx_j^l) = (phi_eps*phi_eps)(x_i - x_j) dt``.

    Coordinates are independent. Log-Jacobians are left untouched.
    """
    mol = mol or make_mollifier()
    gen = as_generator(rng)
    x = sys.positions
    K = correlation_kernel(x[:, None, :] - x[None, :, :], sys.eps, mol) * dt
    K = 0.5 * (K + K.T)
    fac = factorize(K, clip_fallback=True)
    z = gen.standard_normal((len(x), 2))
    new_pos = x + _drift(sys, None) * dt + fac.lower @ z
    return replace(sys, positions=new_pos, t=sys.t + dt)


@dataclass
class BatchFlow:
    """``R`` independent replicas of an ``n``-particle grid-scheme system.

    Every replica gets its own shifted cell lattice and increments each step.
    ``beta`` accumulates the martingale part of ``L``.  ``mass`` weights the
    mass centre (zero entries mark passive probes).
    """

    positions: np.ndarray  # (R, n, 2)
    eps: float
    drift_rate: float = 0.0
    mode: str = "liouville"
    mass: np.ndarray | None = None
    logdets: np.ndarray | None = None
    beta: np.ndarray | None = None
    t: float = 0.0

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=float)
        if self.positions.ndim != 3 or self.positions.shape[-1] != 2:
            raise InputError("positions must have shape (replicas, particles, 2)")
        if not self.eps > 0:
            raise InputError("interaction radius eps must be positive")
        if self.drift_rate < 0:
            raise InputError("drift_rate must be nonnegative")
        drift_trace(self.drift_rate, self.mode)
        R, n, _ = self.positions.shape
        if self.logdets is None:
            self.logdets = np.zeros((R, n))
        if self.beta is None:
            self.beta = np.zeros((R, n))
        if self.mass is not None:
            self.mass = np.asarray(self.mass, dtype=float).reshape(n)
            if not self.mass.sum() > 0:
                raise InputError("carrier mass must be positive to define the mass centre")

    @classmethod
    def start(cls, points, replicas: int, eps: float, **kw) -> "BatchFlow":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 2:
            pts = np.broadcast_to(pts, (replicas,) + pts.shape)
        return cls(np.array(pts), eps, **kw)

    def centers(self) -> np.ndarray:
        if self.mass is None:
            return self.positions.mean(axis=1)
        return np.einsum("n,rnk->rk", self.mass, self.positions) / self.mass.sum()

    def step(self, dt: float, rng, mol: Mollifier | None = None, h: float | None = None) -> np.ndarray:
        """Advance all replicas by ``dt``; returns the martingale increments of ``L``."""
        mol = mol or make_mollifier()
        gen = as_generator(rng)
        h = self.eps / CELLS_PER_EPS if h is None else h
        x = self.positions
        R = x.shape[0]
        # only cells within the stencil reach can contribute
        margin = self.eps + 2 * h
        lo = x.min(axis=1) - margin
        hi = x.max(axis=1) + margin
        origin = np.floor(lo / h) * h - gen.random((R, 2)) * h
        shape = np.ceil((hi - origin) / h).astype(np.int64).max(axis=0) + 1
        inc = gen.standard_normal((R, shape[0], shape[1], 2))
        inc *= h * np.sqrt(dt)
        disp, div = _stencil(x, origin, inc, h, self.eps, mol)
        dbeta = div / self.eps**2
        eps2 = self.eps**2
        tr = drift_trace(self.drift_rate, self.mode)
        if self.drift_rate:
            disp = disp + self.drift_rate * (x - self.centers()[:, None, :]) * dt
        self.positions = x + disp
        self.beta = self.beta + dbeta
        self.logdets = self.logdets + dbeta + (tr - mol.c / (2 * eps2)) * dt
        self.t += dt
        return dbeta


@dataclass
class NoisePath:
    """Everything needed to replay a grid-scheme run for probe particles."""

    dt: float
    eps: float
    drift_rate: float
    mode: str
    grids: list = dc_field(default_factory=list)
    centers: list = dc_field(default_factory=list)


def simulate_grid(
    sys: ParticleSystem,
    dt: float,
    steps: int,
    rng,
    mode: str = "liouville",
    h: float | None = None,
    record: bool = False,
    zero_noise: bool = False,
    callback=None,
):
    """Run ``steps`` grid-scheme steps; returns ``(system, NoisePath or None)``.

    ``callback(step_index, system)`` is invoked after every step.
    """
    mol = make_mollifier()
    gen = as_generator(rng)
    h = sys.eps / CELLS_PER_EPS if h is None else h
    path = NoisePath(dt, sys.eps, sys.drift_rate, mode) if record else None
    for i in range(steps):
        lo, hi = sys.noise_box(h)
        noise = make_noise(lo, hi, h, dt, gen, zero=zero_noise)
        if record:
            path.grids.append(noise)
            path.centers.append(sys.center() if sys.drift_rate else np.zeros(2))
        sys = flow_step_grid(sys, noise, dt, mode, mol)
        if callback is not None:
            callback(i, sys)
    return sys, path



def write_particles_csv(path, snapshots) -> None:
    """Dump ``(t, particle_id, x, y, L)`` rows for a sequence of particle systems."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "particle_id", "x", "y", "L"])
        for sys in snapshots:
            for i, ((x, y), L) in enumerate(zip(sys.positions, sys.logdets)):
                w.writerow([f"{sys.t:.10g}", i, repr(float(x)), repr(float(y)), repr(float(L))])

def replay(points, path: NoisePath) -> ParticleSystem:
    """Move passive probe particles through a recorded noise path."""
    mol = make_mollifier()
    sys = ParticleSystem.start(points, path.eps, path.drift_rate, mass=np.zeros(len(np.atleast_2d(points))))
    for noise, m in zip(path.grids, path.centers):
        sys = flow_step_grid(sys, noise, path.dt, path.mode, mol, center=m)
    return sys


def jacobian_fd(u, path: NoisePath, h: float) -> np.ndarray:
    """Central-difference Jacobian of the recorded time-t flow map at ``u``."""
    u = np.asarray(u, dtype=float).reshape(2)
    if not path.grids:
        return np.eye(2)
    e = np.eye(2) * h
    pts = np.stack([u + e[0], u - e[0], u + e[1], u - e[1]])
    end = replay(pts, path).positions
    J = np.empty((2, 2))
    J[:, 0] = (end[0] - end[1]) / (2 * h)
    J[:, 1] = (end[2] - end[3]) / (2 * h)
    return J


def jacobian_weight(L, k: int):
    """``exp(-(k-1) L)`` and a flag telling whether it overflowed to ``+inf``."""
    with np.errstate(over="ignore"):
        w = np.exp(-(k - 1) * np.asarray(L, dtype=float))
    flag = bool(np.any(np.isinf(w)))
    if np.ndim(w) == 0:
        w = float(w)
    return w, flag


def pair_distance_paths(
    u1, u2, eps: float, a: float, dt: float, t_end: float, rng, replicas: int = 1,
    record_every: int = 1, mol: Mollifier | None = None,
):
    """Vectorized two-particle covariance-scheme runs.

    Returns ``(times, distances)`` with ``distances`` of shape
    ``(replicas, len(times))``.  Each step draws the pair's increments with
    correlation ``(phi_eps*phi_eps)(x_2 - x_1)`` per coordinate and adds the
    drift ``a (x_i - m)`` about the pair's mass centre.
    """
    mol = mol or make_mollifier()
    gen = as_generator(rng)
    steps = int(round(t_end / dt))
    x1 = np.tile(np.asarray(u1, dtype=float), (replicas, 1))
    x2 = np.tile(np.asarray(u2, dtype=float), (replicas, 1))
    times = [0.0]
    out = [np.linalg.norm(x2 - x1, axis=1)]
    sq = np.sqrt(dt)
    for i in range(1, steps + 1):
        y = x2 - x1
        rho = correlation_kernel(y, eps, mol)
        z1 = gen.standard_normal((replicas, 2))
        z2 = gen.standard_normal((replicas, 2))
        inc1 = z1 * sq
        inc2 = (rho[:, None] * z1 + np.sqrt(np.clip(1 - rho**2, 0, None))[:, None] * z2) * sq
        # drift about the pair's centre: a (x_i - m) = -/+ a y / 2
        x1 = x1 - 0.5 * a * y * dt + inc1
        x2 = x2 + 0.5 * a * y * dt + inc2
        if i % record_every == 0:
            times.append(i * dt)
            out.append(np.linalg.norm(x2 - x1, axis=1))
    return np.array(times), np.stack(out, axis=1)


def pair_distance_path(u1, u2, eps, a, dt, t_end, rng, record_every: int = 1):
    times, d = pair_distance_paths(u1, u2, eps, a, dt, t_end, rng, 1, record_every)
    return times, d[0]
