"""Monte Carlo studies built from the field, SILT and flow components.

Replicas are processed in fixed-size chunks.  Chunk ``j`` of experiment
``name`` draws from ``stream(seed, name, j)``, so results depend only on the
seed and never on how chunks are distributed over workers; ``map_fn`` lets a
caller supply a parallel ``map`` and chunk outputs are reduced in order.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field as dc_field
from functools import partial
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.optimize import linprog

from .errors import InputError
from .field import CovarianceSpec, FieldSample, GridSpec, sample_field
from .flow_det import (
    DriftSpec,
    FlowConfig,
    bounded_wasserstein,
    discretize_occupation,
    integrate_flow,
)
from .flow_iso import (
    BatchFlow,
    ParticleSystem,
    correlation_kernel,
    drift_trace,
    gradient_correlation,
    jacobian_fd,
    make_mollifier,
    simulate_grid,
)
from .localtime import Bins, SiltConfig, chain_contributions, self_intersection_measure, silt_estimate
from .rng import stream

CHUNK = 250
GUARD_SIGMA2 = 4.0


@dataclass
class ExperimentRecord:
    experiment: str
    params: dict
    estimate: float
    stderr: float
    seed: int
    modes: dict = dc_field(default_factory=dict)
    wall_time: float = 0.0
    extra: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if not self.stderr >= 0 and not np.isnan(self.stderr):
            raise InputError("stderr must be nonnegative")
        if self.params.get("replicas", 1) < 1:
            raise InputError("replicas must be >= 1")

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass
class MartingalePath:
    times: np.ndarray
    values: np.ndarray
    qv_formula: np.ndarray  # cumulative integral formula along the same path

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise InputError("times must be strictly increasing")

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values)

    @property
    def realized_qv(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.increments**2)])


@dataclass
class MartingaleEnsemble:
    times: np.ndarray
    values: np.ndarray  # (replicas, len(times))
    qv_formula: np.ndarray  # (replicas, len(times))

    def path(self, i: int) -> MartingalePath:
        return MartingalePath(self.times, self.values[i], self.qv_formula[i])

    @property
    def realized_qv(self) -> np.ndarray:
        d = np.diff(self.values, axis=1)
        return np.concatenate([np.zeros((len(d), 1)), np.cumsum(d * d, axis=1)], axis=1)


# ---------------------------------------------------------------- utilities

def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float).ravel()
    if x.size < 2:
        return float(x.mean()), float("nan")
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def chunks(replicas: int, size: int = CHUNK) -> list[tuple[int, int]]:
    if replicas < 1:
        raise InputError("replicas must be >= 1")
    out, j, left = [], 0, replicas
    while left > 0:
        n = min(size, left)
        out.append((j, n))
        left -= n
        j += 1
    return out


def run_chunks(task: Callable, replicas: int, map_fn=map, size: int = CHUNK) -> list:
    """Apply ``task(chunk_id, count)`` to every chunk, results in chunk order."""
    return list(map_fn(task, *zip(*chunks(replicas, size))))


def variance_guard(c: float, t: float, k: int, eps: float, replicas: int) -> float:
    """Refuse lognormal weights whose log-variance makes plain Monte Carlo useless.

    The log-variance ``sigma^2 = c t (k-1)^2 / eps^2`` must stay below
    ``max(4, ln(replicas / 10))``; the second term keeps the relative
    standard error of the weight mean near ``sqrt(exp(sigma^2) / replicas) <= 0.32``.
    Antithetic noise or the unit-mean per-atom stochastic exponential used as a
    control variate are the usual ways around the guard.
    """
    s2 = c * t * (k - 1) ** 2 / eps**2
    limit = max(GUARD_SIGMA2, np.log(max(replicas, 1) / 10.0))
    if s2 > limit:
        raise InputError(
            f"log-weight variance c t (k-1)^2/eps^2 = {s2:.3g} exceeds {limit:.3g}; "
            "lognormal weights would make the Monte Carlo mean meaningless "
            "(increase eps or replicas, shorten t, or use a control variate)"
        )
    return s2


def growth_exponent(k: int, eps: float, a: float, mode: str, c: float | None = None) -> float:
    """Rate ``lambda`` in ``E rho = exp(lambda t)`` for ``rho = exp(-(k-1) L)``."""
    c = make_mollifier().c if c is None else c
    return (k - 1) * (k * c / (2 * eps**2) - drift_trace(a, mode))


def _silt_atoms(field: FieldSample, cfg: SiltConfig, nbins: int):
    """``nbins^2`` atoms (bin centres, empty bins carry zero mass) of nu_k."""
    bins = Bins.covering(field.points, nbins)
    pts = field.points
    which = bins.locate(pts)
    contrib = chain_contributions(pts, cfg.k, cfg.epsilon, field.grid.cell_volume)
    mass = np.bincount(which, weights=contrib, minlength=nbins * nbins)
    return bins.centers(), mass


def _flow_atoms(
    atoms, weights, carriers, eps, a, mode, dt, record_steps, gen, k=2, qv=False
):
    """Batched grid-scheme flow of ``(R, n, 2)`` atoms with optional carriers.

    Returns ``(beta, L)`` at every recorded step (shape ``(J, R, n)``) and, with
    ``qv``, the cumulative quadratic-characteristic integral ``(J, R)``.
    """
    R, n, _ = atoms.shape
    if a > 0:
        if carriers is None:
            raise InputError("a > 0 needs carrier particles for the mass centre")
        pos = np.concatenate([atoms, carriers], axis=1)
        mass = np.concatenate([np.zeros(n), np.full(carriers.shape[1], 1.0 / carriers.shape[1])])
    else:
        pos, mass = atoms, None
    flow = BatchFlow(pos, eps, a, mode, mass)
    mol = make_mollifier()
    rec = set(int(s) for s in record_steps)
    steps = max(rec)
    betas, Ls, qvs = [], [], []
    qcum = np.zeros(R)
    c = mol.c
    if 0 in rec:
        betas.append(np.zeros((R, n)))
        Ls.append(np.zeros((R, n)))
        qvs.append(qcum.copy())
    for s in range(1, steps + 1):
        if qv:
            x = flow.positions[:, :n]
            E = weights * np.exp(-(k - 1) * flow.beta[:, :n] - c * (k - 1) ** 2 * flow.t / (2 * eps**2))
            G = gradient_correlation(x[:, :, None, :] - x[:, None, :, :], eps, mol)
            qcum = qcum + (k - 1) ** 2 * np.einsum("ri,rij,rj->r", E, G, E) * dt
        flow.step(dt, gen, mol)
        if s in rec:
            betas.append(flow.beta[:, :n].copy())
            Ls.append(flow.logdets[:, :n].copy())
            qvs.append(qcum.copy())
    return np.stack(betas), np.stack(Ls), np.stack(qvs)


def _steps_for(t_list, dt) -> list[int]:
    steps = [int(round(t / dt)) for t in t_list]
    for t, s in zip(t_list, steps):
        if abs(s * dt - t) > 1e-9 * max(1.0, t):
            raise InputError(f"t={t} is not a multiple of dt={dt}")
    return steps


# ---------------------------------------------------------- expected SILT

def _silt_chunk(j, n, seed, grid, spec, cfg, weight, seeds):
    out = np.empty(n)
    for i in range(n):
        rid = j * CHUNK + i
        g = stream(seeds[rid]) if seeds is not None else stream(seed, "expected_silt", rid)
        f = sample_field(grid, spec, g)
        out[i] = silt_estimate(f, cfg, weight, g)[0]
    return out


def expected_silt(
    grid: GridSpec,
    spec: CovarianceSpec,
    cfg: SiltConfig,
    replicas: int,
    seed: int = 0,
    weight=1.0,
    seeds: Sequence[int] | None = None,
    map_fn=map,
) -> tuple[float, float]:
    """Mean and standard error of the SILT estimator over independent fields.

    ``seeds`` optionally pins each replica's stream explicitly.
    """
    if replicas < 2:
        raise InputError("expected_silt needs replicas >= 2")
    if seeds is not None and len(seeds) != replicas:
        raise InputError("need one seed per replica")
    task = partial(_silt_chunk, seed=seed, grid=grid, spec=spec, cfg=cfg, weight=weight,
                   seeds=None if seeds is None else list(seeds))
    vals = np.concatenate(run_chunks(task, replicas, map_fn))
    m, se = mean_se(vals)
    return m, (0.0 if np.ptp(vals) == 0 else se)


# ------------------------------------------------- stochastic exponential

def _stoch_exp_chunk(j, n, seed, eps, a, t, dt, mode):
    g = stream(seed, "stochastic_exponential", j)
    flow = BatchFlow.start(np.zeros((1, 2)), n, eps, drift_rate=a, mode=mode)
    mol = make_mollifier()
    steps = _steps_for([t], dt)[0]
    sq = np.zeros(n)
    for _ in range(steps):
        sq += flow.step(dt, g, mol)[:, 0] ** 2
    return np.stack([flow.logdets[:, 0], sq / steps])


def stochastic_exponential(
    eps: float, t: float, replicas: int, dt: float = 1e-3, a: float = 0.0,
    mode: str = "liouville", seed: int = 0, map_fn=map,
) -> dict:
    """Single-particle check of ``E det x' = exp(trace t)`` and of the per-step
    martingale variance ``(c / eps^2) dt`` of ``log det x'``."""
    t0 = time.perf_counter()
    task = partial(_stoch_exp_chunk, seed=seed, eps=eps, a=a, t=t, dt=dt, mode=mode)
    L, step_var = np.concatenate(run_chunks(task, replicas, map_fn), axis=1)
    c = make_mollifier().c
    det = np.exp(L - drift_trace(a, mode) * t)
    m, se = mean_se(det)
    v, vse = mean_se(step_var)
    return {
        "mean_det": m, "mean_det_se": se,
        "step_var": v, "step_var_se": vse, "step_var_target": c * dt / eps**2,
        "log_var": c * t / eps**2, "wall_time": time.perf_counter() - t0,
    }


# ------------------------------------------------ scaling experiments

def _weight_chunk(j, n, seed, name, field_seed, grid, spec, cfg, nbins, eps, a, mode, dt,
                  steps, frozen, k):
    g = stream(seed, name, j)
    if frozen:
        fields = [sample_field(grid, spec, stream(field_seed, "frozen_field"))] * n
    else:
        fields = [sample_field(grid, spec, g) for _ in range(n)]
    atoms, weights = zip(*(_silt_atoms(f, cfg, nbins) for f in fields))
    atoms, weights = np.stack(atoms), np.stack(weights)
    carriers = np.stack([discretize_occupation(f, 4).points for f in fields]) if a > 0 else None
    _, L, _ = _flow_atoms(atoms, weights, carriers, eps, a, mode, dt, steps, g, k)
    rho = np.exp(-(k - 1) * L)  # (J, R, n)
    T = np.einsum("jrn,rn->jr", rho, weights)
    u = int(np.argmax(weights[0]))
    base = weights.sum(axis=1)
    return np.concatenate([T, rho[:, :, u], base[None]], axis=0)


def _scaling_table(
    name, t_list, k, eps, a, mode, replicas, seed, dt, frozen, grid, spec, cfg, nbins, map_fn,
):
    c = make_mollifier().c
    t_list = [float(t) for t in t_list]
    for t in t_list:
        variance_guard(c, t, k, eps, replicas)
    steps = _steps_for(t_list, dt)
    rec_steps = sorted(set([0] + steps))
    t0 = time.perf_counter()
    task = partial(_weight_chunk, seed=seed, name=name, field_seed=seed, grid=grid, spec=spec,
                   cfg=cfg, nbins=nbins, eps=eps, a=a, mode=mode, dt=dt, steps=rec_steps,
                   frozen=frozen, k=k)
    out = np.concatenate(run_chunks(task, replicas, map_fn, size=_chunk_for(nbins)), axis=1)
    J = len(rec_steps)
    T, rho_u, base = out[:J], out[J:2 * J], out[2 * J]
    lam = growth_exponent(k, eps, a, mode, c)
    b_mean, b_se = mean_se(base)
    wall = time.perf_counter() - t0
    recs = []
    means = []
    for t, s in zip(t_list, steps):
        i = rec_steps.index(s)
        scale = np.exp(-lam * t)
        m, se = mean_se(T[i])
        means.append(m)
        w_m, w_se = mean_se(rho_u[i])
        recs.append(ExperimentRecord(
            name,
            dict(k=k, eps_kernel=cfg.epsilon, eps_interaction=eps, a=a, t=t, dt=dt,
                 replicas=replicas, n=grid.ny, nbins=nbins, frozen=frozen),
            estimate=m * scale, stderr=se * scale, seed=seed, modes={"drift_trace": mode},
            wall_time=wall,
            extra=dict(
                mean_T=m, mean_T_se=se, baseline=b_mean, baseline_se=b_se,
                ratio=(m * scale / b_mean) if b_mean > 0 else float("nan"),
                exponent=lam, literal_exponent=(k * c - 2 * a) * (k - 1) / eps**2,
                weight_mean_scaled=w_m * np.exp(-lam * t), weight_mean_scaled_se=w_se * np.exp(-lam * t),
            ),
        ))
    return recs, np.array(means)


def _chunk_for(nbins: int) -> int:
    return max(25, min(CHUNK, 4000 // max(nbins * nbins, 1)))


def eps_scaling(
    t: float, k: int, eps_list, replicas: int, seed: int = 0, dt: float = 1e-3,
    grid: GridSpec = GridSpec(), spec: CovarianceSpec = CovarianceSpec(),
    cfg: SiltConfig | None = None, nbins: int = 6, frozen: bool = False, mode: str = "liouville",
    map_fn=map,
) -> list[ExperimentRecord]:
    """``exp(-ck(k-1)t/(2 eps^2)) E T^{x_eps(eta,t)}_k`` per interaction radius."""
    cfg = cfg or SiltConfig(k=k, epsilon=0.01)
    if cfg.k != k:
        raise InputError("SiltConfig.k and k disagree")
    recs = []
    for eps in eps_list:
        if t == 0:
            r, _ = _scaling_table("eps_scaling", [dt], k, eps, 0.0, mode, replicas, seed, dt,
                                  frozen, grid, spec, cfg, nbins, map_fn)
            r[0].params["t"] = 0.0
            r[0].estimate = r[0].extra["baseline"]
            r[0].stderr = r[0].extra["baseline_se"]
            r[0].extra["ratio"] = 1.0
            recs += r
            continue
        r, _ = _scaling_table("eps_scaling", [t], k, eps, 0.0, mode, replicas, seed, dt, frozen,
                              grid, spec, cfg, nbins, map_fn)
        recs += r
    return recs


def time_scaling(
    eps_fixed: float, k: int, t_list, a: float, replicas: int, seed: int = 0,
    dt: float = 5e-3, grid: GridSpec = GridSpec(), spec: CovarianceSpec = CovarianceSpec(),
    cfg: SiltConfig | None = None, nbins: int = 6, frozen: bool = True,
    mode: str = "liouville", map_fn=map,
) -> tuple[list[ExperimentRecord], dict]:
    """Scaled expectations over ``t`` plus the fitted log-slope of the unscaled mean.

    With ``a = 0`` the predicted slope is ``c k (k-1) / (2 eps^2)``; with
    ``a > 0`` the drift trace is subtracted (see :func:`growth_exponent`).
    """
    if not (eps_fixed == 1.0 or a > 0):
        raise InputError("time_scaling needs eps = 1 or a > 0")
    cfg = cfg or SiltConfig(k=k, epsilon=0.01)
    ts = [float(t) for t in t_list if t > 0]
    recs, means = _scaling_table("time_scaling", ts, k, eps_fixed, a, mode, replicas, seed, dt,
                                 frozen, grid, spec, cfg, nbins, map_fn) if ts else ([], np.array([]))
    if any(t == 0 for t in t_list):
        base = recs[0].extra["baseline"] if recs else float("nan")
        r0 = ExperimentRecord("time_scaling", dict(k=k, eps_interaction=eps_fixed, a=a, t=0.0,
                              dt=dt, replicas=replicas), base, recs[0].extra["baseline_se"] if recs else 0.0,
                              seed, {"drift_trace": mode}, extra={"ratio": 1.0})
        recs = [r0] + recs
    fit = {}
    if len(ts) >= 2:
        slope, icpt = np.polyfit(ts, np.log(means), 1)
        fit = dict(slope=float(slope), intercept=float(icpt),
                   predicted=growth_exponent(k, eps_fixed, a, mode))
    return recs, fit


# ------------------------------------------------------------- dispersion

def dispersion_baseline(alpha: float = 1.0) -> float:
    """``int_D int_D E|eta(u2) - eta(u1)|^2 du1 du2`` by nested quadrature.

    ``E|eta(u2) - eta(u1)|^2 = 2 (t1 + t2 - 2 exp(-|y1-y2|^alpha) min(t1, t2))``.
    The y and t integrals separate; the y part reduces to one dimension in the
    difference ``s = |y1 - y2|`` with density ``2 (1 - s)``.
    """
    ey, _ = quad(lambda s: 2 * (1 - s) * np.exp(-(s**alpha)), 0.0, 1.0, epsabs=1e-13, epsrel=1e-13)
    tsum = 3.0  # int int (t1 + t2) over [1, 2]^2
    tmin, _ = quad(lambda t1: quad(lambda t2: min(t1, t2), 1.0, 2.0, points=[t1])[0], 1.0, 2.0,
                   epsabs=1e-13, epsrel=1e-13)
    return 2.0 * (tsum - 2.0 * ey * tmin)


def _disp_chunk(j, n, seed, eps, t, dt, grid, spec):
    g = stream(seed, "dispersion_limit", j)
    fields = np.stack([sample_field(grid, spec, g).points for _ in range(n)])
    steps = _steps_for([t], dt)[0] if t > 0 else 0
    x = fields
    if steps:
        flow = BatchFlow(fields, eps)
        mol = make_mollifier()
        for _ in range(steps):
            flow.step(dt, g, mol)
        x = flow.positions

    def pair_mean(p):
        # mean over ordered pairs of |p_i - p_j|^2 = 2 (mean |p|^2 - |mean p|^2)
        return 2 * (np.mean(np.sum(p**2, axis=-1), axis=-1) - np.sum(p.mean(axis=1) ** 2, axis=-1))

    return np.stack([pair_mean(x), pair_mean(fields)])


def dispersion_limit(
    t: float, eps_list, replicas: int, seed: int = 0, dt: float = 1e-2,
    grid: GridSpec = GridSpec(), spec: CovarianceSpec = CovarianceSpec(), map_fn=map,
) -> list[ExperimentRecord]:
    """``E int int |x_eps(eta(u2),t) - x_eps(eta(u1),t)|^2 du1 du2`` against ``4t + baseline``."""
    base = dispersion_baseline(spec.alpha)
    recs = []
    for eps in eps_list:
        t0 = time.perf_counter()
        task = partial(_disp_chunk, seed=seed, eps=eps, t=t, dt=dt, grid=grid, spec=spec)
        est, emp_base = np.concatenate(run_chunks(task, replicas, map_fn, size=25), axis=1)
        area = grid.area
        m, se = mean_se(est * area**2)
        bm, bse = mean_se(emp_base * area**2)
        recs.append(ExperimentRecord(
            "dispersion_limit",
            dict(eps_interaction=eps, t=t, dt=dt, replicas=replicas, n=grid.ny, alpha=spec.alpha),
            m, se, seed, wall_time=time.perf_counter() - t0,
            extra=dict(baseline=base, empirical_baseline=bm, empirical_baseline_se=bse,
                       target=4 * t + base, rel_error=(m - 4 * t - base) / (4 * t + base)),
        ))
    return recs


# ----------------------------------------------------------- martingale

def _mart_chunk(j, n, seed, grid, spec, cfg, nbins, eps, a, mode, dt, steps, k):
    g = stream(seed, "martingale_run", j)
    fields = [sample_field(grid, spec, g) for _ in range(n)]
    atoms, weights = zip(*(_silt_atoms(f, cfg, nbins) for f in fields))
    atoms, weights = np.stack(atoms), np.stack(weights)
    carriers = np.stack([discretize_occupation(f, 4).points for f in fields]) if a > 0 else None
    beta, _, qv = _flow_atoms(atoms, weights, carriers, eps, a, mode, dt, steps, g, k, qv=True)
    c = make_mollifier().c
    times = np.array(steps) * dt
    E = np.exp(-(k - 1) * beta - c * (k - 1) ** 2 * times[:, None, None] / (2 * eps**2))
    m = np.einsum("jrn,rn->rj", E, weights)
    return np.concatenate([m, qv.T], axis=1)


def martingale_run(
    k: int = 2, a: float = 0.0, eps: float = 1.5, dt: float = 5e-3, t_grid=None,
    replicas: int = 1000, seed: int = 0, grid: GridSpec = GridSpec(),
    spec: CovarianceSpec = CovarianceSpec(), cfg: SiltConfig | None = None, nbins: int = 6,
    mode: str = "liouville", map_fn=map,
) -> tuple[MartingaleEnsemble, dict]:
    """Renormalized martingale ``m_k(t) = sum_atoms w exp(-(k-1) beta - c (k-1)^2 t / (2 eps^2))``.

    Returns the ensemble and a summary with the flatness, orthogonality and
    quadratic-variation statistics.
    """
    t_grid = np.linspace(0.0, 0.5, 11) if t_grid is None else np.asarray(t_grid, dtype=float)
    if t_grid[0] != 0:
        raise InputError("t_grid must start at 0")
    cfg = cfg or SiltConfig(k=k, epsilon=0.01)
    steps = _steps_for(list(t_grid), dt)
    t0 = time.perf_counter()
    task = partial(_mart_chunk, seed=seed, grid=grid, spec=spec, cfg=cfg, nbins=nbins, eps=eps,
                   a=a, mode=mode, dt=dt, steps=steps, k=k)
    out = np.concatenate(run_chunks(task, replicas, map_fn, size=_chunk_for(nbins)), axis=0)
    J = len(t_grid)
    ens = MartingaleEnsemble(t_grid, out[:, :J], out[:, J:])
    vals = ens.values
    means = vals.mean(axis=0)
    diff = vals - vals[:, :1]
    d_mean = diff.mean(axis=0)
    d_se = diff.std(axis=0, ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else np.full(J, np.nan)
    inc = np.diff(vals, axis=1).ravel()
    past = vals[:, :-1].ravel()
    pc = past - past.mean()
    slope = float(pc @ inc / (pc @ pc)) if pc @ pc > 0 else 0.0
    resid = inc - inc.mean() - slope * pc
    slope_se = float(np.sqrt(resid @ resid / max(len(inc) - 2, 1) / (pc @ pc))) if pc @ pc > 0 else 0.0
    rq = ens.realized_qv[:, -1].mean()
    fq = ens.qv_formula[:, -1].mean()
    summary = dict(
        means=means, drift=d_mean, drift_se=d_se,
        max_z=float(np.max(np.abs(d_mean[1:]) / d_se[1:])) if J > 1 else 0.0,
        positive=bool(np.all(vals > 0)),
        orthogonality_slope=slope, orthogonality_se=slope_se,
        realized_qv=float(rq), formula_qv=float(fq), qv_ratio=float(rq / fq) if fq > 0 else float("nan"),
        wall_time=time.perf_counter() - t0,
    )
    return ens, summary


def qv_envelope(ens: MartingaleEnsemble, k: int, a: float, c: float | None = None) -> dict:
    """Fit ``E<m>(t) exp(-3(k-1)^2 c t) <= K t / sqrt(1 + a t)``; returns ``K`` and the ratios."""
    c = make_mollifier().c if c is None else c
    t = ens.times[1:]
    lhs = ens.qv_formula[:, 1:].mean(axis=0) * np.exp(-3 * (k - 1) ** 2 * c * t)
    shape = t / np.sqrt(1.0 + a * t)
    ratio = lhs / shape
    return dict(K=float(ratio.max()), ratios=ratio)


# ------------------------------------------------------ decorrelation

def pair_covariation(
    distance: float, eps: float, t: float, dt: float, replicas: int, seed: int = 0, a: float = 0.0,
) -> dict:
    """Per-coordinate covariation of two particles' increments per unit time.

    Two estimators over the covariance scheme: the realized ``sum dx1 . dx2 / 2``
    and its compensator ``sum kappa(|x2 - x1|) dt`` (the conditional
    expectation of the same increments given the past).  Both are divided by ``t``.
    """
    g = stream(seed, "pair_covariation", int(round(eps * 1e6)))
    mol = make_mollifier()
    steps = _steps_for([t], dt)[0]
    x1 = np.zeros((replicas, 2))
    x2 = np.tile([distance, 0.0], (replicas, 1))
    realized = np.zeros(replicas)
    comp = np.zeros(replicas)
    sq = np.sqrt(dt)
    for _ in range(steps):
        y = x2 - x1
        rho = correlation_kernel(y, eps, mol)
        z1 = g.standard_normal((replicas, 2))
        z2 = g.standard_normal((replicas, 2))
        d1 = z1 * sq - 0.5 * a * y * dt
        d2 = (rho[:, None] * z1 + np.sqrt(np.clip(1 - rho**2, 0, None))[:, None] * z2) * sq + 0.5 * a * y * dt
        realized += 0.5 * np.sum(d1 * d2, axis=1)
        comp += rho * dt
        x1, x2 = x1 + d1, x2 + d2
    r, rse = mean_se(realized / t)
    m, mse = mean_se(comp / t)
    return dict(eps=eps, realized=r, realized_se=rse, compensator=m, compensator_se=mse,
                initial=float(correlation_kernel(np.array([distance, 0.0]), eps, mol)))


# ----------------------------------------------------------- hitting

def _hit_chunk(j, n, seed, u1, u2, a, eps, dt, t_grid):
    from .flow_iso import pair_distance_paths

    g = stream(seed, "hitting_probability", j)
    steps = _steps_for(t_grid, dt)
    tmax = max(t_grid)
    every = int(np.gcd.reduce(steps))
    times, d = pair_distance_paths(u1, u2, eps, a, dt, tmax, g, n, record_every=every)
    idx = [int(round(s / every)) for s in steps]
    return (d[:, idx] <= 1.0).astype(float).T


def envelope_fit(t, p, a: float, dist: float) -> dict:
    """Minimal ``(c1, c2) >= 0`` with ``(c1 ln(1/d) + c2) / (a t) >= p`` at every ``t``."""
    t = np.asarray(t, dtype=float)
    p = np.asarray(p, dtype=float)
    ell = np.log(1.0 / dist)
    A = np.column_stack([ell / (a * t), 1.0 / (a * t)])
    res = linprog(A.sum(axis=0) + 1e-12, A_ub=-A, b_ub=-p, bounds=[(0, None), (0, None)], method="highs")
    if res.status != 0:
        return dict(ok=False, c1=float("nan"), c2=float("nan"), bound=np.full(len(t), np.nan))
    c1, c2 = res.x
    return dict(ok=bool(np.isfinite(res.x).all()), c1=float(c1), c2=float(c2), bound=A @ res.x)


def hitting_probability(
    u1, u2, a: float, eps: float, t_grid, replicas: int, seed: int = 0, dt: float = 1e-3,
    map_fn=map,
) -> tuple[list[ExperimentRecord], dict]:
    """Empirical ``P{|x(u2,t) - x(u1,t)| <= 1}`` on ``t_grid`` and the envelope fit."""
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    dist = float(np.linalg.norm(u2 - u1))
    t_grid = [float(t) for t in t_grid]
    if not a > 0:
        raise InputError("hitting_probability needs a > 0")
    for t in t_grid:
        if not np.exp(-a * t) < dist < 1:
            raise InputError(
                f"precondition exp(-a t) < |u2 - u1| < 1 fails at t={t} (|u2 - u1|={dist:.3g})"
            )
    t0 = time.perf_counter()
    task = partial(_hit_chunk, seed=seed, u1=u1, u2=u2, a=a, eps=eps, dt=dt, t_grid=t_grid)
    hits = np.concatenate(run_chunks(task, replicas, map_fn, size=2500), axis=1)
    wall = time.perf_counter() - t0
    p = hits.mean(axis=1)
    se = np.sqrt(p * (1 - p) / replicas)
    fit = envelope_fit(t_grid, p, a, dist)
    recs = [
        ExperimentRecord("hitting_probability",
                         dict(eps_interaction=eps, a=a, t=t, dt=dt, replicas=replicas, distance=dist),
                         float(pi), float(si), seed, wall_time=wall,
                         extra=dict(bound=float(b)))
        for t, pi, si, b in zip(t_grid, p, se, fit["bound"])
    ]
    fit["nonincreasing"] = bool(np.all(np.diff(p) <= 0))
    fit["probabilities"] = p
    return recs, fit


# ------------------------------------------- discretization convergence

def discretization_convergence(
    field: FieldSample, n_list, t: float, drift: DriftSpec, cfg: SiltConfig | None = None,
    dt: float = 1e-2,
) -> tuple[list[ExperimentRecord], dict]:
    """``I^n``: SILT of the field flowed by the interaction equation started from mu_n.

    The drift's Jacobian trace is spatially constant for the supported drift
    kinds, so ``I^n = exp(-(k-1) int_0^t tr ds) T^eta``.  Also reports
    ``gamma(mu_n, mu_2n)`` and the smallest ``C`` with
    ``|I^2n - I^n| <= C gamma(mu_n, mu_2n)``.
    """
    cfg = cfg or SiltConfig(k=2, epsilon=0.01)
    if drift.kind not in ("linear_center_of_mass", "modulated_linear", "radial_from_center"):
        raise InputError("discretization_convergence needs a linear-type drift")
    n_list = sorted(int(n) for n in n_list)
    base, _ = silt_estimate(field, cfg)
    fc = FlowConfig(dt=dt, t_end=t)
    I, mus = {}, {}
    for n in sorted(set(n_list) | {2 * n for n in n_list}):
        mu = discretize_occupation(field, n)
        mus[n] = mu
        res = integrate_flow(mu, drift, fc, probes=mu.points[:1])
        I[n] = float(np.exp(-(cfg.k - 1) * res.log_det[0]) * base)
    rows, recs = [], []
    for n in n_list:
        gam, exact = bounded_wasserstein(mus[n], mus[2 * n])
        diff = abs(I[2 * n] - I[n])
        rows.append((n, I[n], I[2 * n], diff, gam, exact))
        recs.append(ExperimentRecord(
            "discretization_convergence",
            dict(k=cfg.k, eps_kernel=cfg.epsilon, t=t, n=n, dt=dt, replicas=1),
            I[n], 0.0, 0, extra=dict(I_2n=I[2 * n], diff=diff, gamma=gam, gamma_exact=exact),
        ))
    diffs = np.array([r[3] for r in rows])
    gams = np.array([r[4] for r in rows])
    pos = gams > 0
    C = float(np.max(diffs[pos] / gams[pos])) if pos.any() else 0.0
    summary = dict(
        rows=rows, C=C, baseline=base,
        decreasing=bool(np.all(np.diff(diffs) < 0)),
        bounded=bool(np.all(diffs <= C * gams + 1e-15 * max(1.0, base))),
    )
    return recs, summary


# ----------------------------------------------- Jacobian cross-check

def jacobian_crossval(
    paths: int, eps: float = 2.0, a: float = 2.0, t: float = 0.25, dt: float = 2.5e-4,
    h: float = 1e-3, carriers: int = 4, seed: int = 0, tol: float = 5e-2,
) -> dict:
    """Tracked ``log det`` against the finite-difference Jacobian of the replayed flow.

    Each path moves ``carriers`` particles (the first one is tracked); the FD
    oracle re-runs ``u +- h e_i`` and ``u +- 2h e_i`` as massless probes under
    the recorded noise and mass-centre path.  A mode matches a path when
    ``|L_mode - log det J| <= max(tol, 3 err)`` with ``err`` the Richardson
    estimate of the FD error.
    """
    rows = []
    for i in range(paths):
        g = stream(seed, "jacobian_crossval", i)
        start = g.uniform(-1.0, 1.0, size=(carriers, 2))
        sys = ParticleSystem.start(start, eps, a)
        end, path = simulate_grid(sys, dt, _steps_for([t], dt)[0], g, mode="liouville", record=True)
        L_liou = float(end.logdets[0])
        L = {"liouville": L_liou, "paper": L_liou - (drift_trace(a, "liouville") - drift_trace(a, "paper")) * t}
        J1 = jacobian_fd(start[0], path, h)
        J2 = jacobian_fd(start[0], path, 2 * h)
        d1 = float(np.log(abs(np.linalg.det(J1))))
        d2 = float(np.log(abs(np.linalg.det(J2))))
        fd = (4 * d1 - d2) / 3
        err = abs(d1 - d2) / 3
        thr = max(tol, 3 * err)
        match = [m for m in ("paper", "liouville") if abs(L[m] - fd) <= thr]
        rows.append(dict(fd=fd, err=err, L_liouville=L["liouville"], L_paper=L["paper"], match=match))
    modes = {tuple(r["match"]) for r in rows}
    selected = modes.pop() if len(modes) == 1 else None
    return dict(
        rows=rows,
        selected=(selected[0] if selected and len(selected) == 1 else None),
        max_dev_liouville=max(abs(r["L_liouville"] - r["fd"]) for r in rows),
        max_dev_paper=max(abs(r["L_paper"] - r["fd"]) for r in rows),
    )


# ------------------------------------------------ interaction stability probe

def interaction_stability(field: FieldSample, drift: DriftSpec, n: int, m: int, t: float,
                          dt: float = 1e-2, probes: int = 4) -> dict:
    """Largest probe displacement between the flows driven by ``mu_n`` and ``mu_m``
    at time ``t``, relative to ``gamma(mu_n, mu_m)``."""
    fc = FlowConfig(dt=dt, t_end=t)
    a, b = discretize_occupation(field, n), discretize_occupation(field, m)
    g0, exact = bounded_wasserstein(a, b)
    u = discretize_occupation(field, probes).points
    xa = integrate_flow(a, drift, fc, probes=u, track_det=False).probes
    xb = integrate_flow(b, drift, fc, probes=u, track_det=False).probes
    disp = float(np.max(np.linalg.norm(xa - xb, axis=1)))
    return dict(gamma=g0, displacement=disp, ratio=(disp / g0) if g0 > 0 else float("nan"), exact=exact)


def fit_stability_constant(probes: list[dict]) -> dict:
    """Least-squares ``C`` in ``displacement ~ C gamma`` over a batch of
    :func:`interaction_stability` results, plus the largest single ratio."""
    g = np.array([p["gamma"] for p in probes])
    d = np.array([p["displacement"] for p in probes])
    return dict(C=float(d @ g / (g @ g)), max_ratio=float(np.max(d / g)), count=len(probes))
