"""Acceptance criteria, one test each, run at the stated tolerances.

Every test prints a single ``criterion N: PASS|FAIL`` line (also collected in
the terminal summary).  Seeds are fixed at 0 and were not tuned.
"""
import time

import numpy as np
import pytest

from siltflow.experiments import (
    discretization_convergence,
    dispersion_limit,
    hitting_probability,
    jacobian_crossval,
    martingale_run,
    pair_covariation,
    stochastic_exponential,
    time_scaling,
)
from siltflow.field import (
    CovarianceSpec,
    GridSpec,
    covariance_matrix,
    empirical_covariance,
    sample_field,
    sample_field_values,
    sample_product_field_values,
)
from siltflow.flow_det import (
    DriftSpec,
    FlowConfig,
    closed_form_linear_flow,
    discretize_occupation,
    integrate_flow,
    matrix_exp,
)
from siltflow.flow_iso import make_mollifier
from siltflow.gram import GaussianSystem, chain_bound
from siltflow.localtime import Bins, SiltConfig, affine_image_silt, log_energy, self_intersection_measure, silt_estimate
from siltflow.rng import stream

pytestmark = pytest.mark.acceptance

SEED = 0
C_GRAD = make_mollifier().c


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def test_criterion_01_covariance_fidelity(report):
    grid = GridSpec(20, 20)
    pick = stream(SEED, "acceptance-1-pairs")
    pairs = [tuple(int(i) for i in pick.integers(0, grid.size, 2)) for _ in range(50)]
    worst_gauss, worst_prod, fails = 0.0, 0.0, 0
    with Timer() as tm:
        for alpha in (0.5, 1.0, 2.0):
            spec = CovarianceSpec(alpha)
            M = covariance_matrix(grid, spec)
            gauss = empirical_covariance(sample_field_values(grid, spec, stream(SEED, "acc1-g", int(alpha * 10)), 20000), pairs)
            prod = empirical_covariance(sample_product_field_values(grid, spec, stream(SEED, "acc1-p", int(alpha * 10)), 20000), pairs)
            for (i, j), (cg, sg), (cp, sp) in zip(pairs, gauss, prod):
                zg = abs(cg - M[i, j]) / sg
                zp = abs(cp - cg) / np.hypot(sg, sp)
                worst_gauss, worst_prod = max(worst_gauss, zg), max(worst_prod, zp)
                fails += (zg > 3) + (zp > 3)
    ok = fails == 0
    assert report(1, ok, f"worst |z| analytic {worst_gauss:.2f}, product-vs-gaussian {worst_prod:.2f}, "
                         f"{fails} of 300 comparisons beyond 3 SE", tm.seconds, 120)


def test_criterion_02_chain_bound(report):
    gen = stream(SEED, "acceptance-2")
    worst, violations = np.inf, 0
    with Timer() as tm:
        for _ in range(1000):
            n = int(gen.integers(2, 7))
            rank = int(gen.integers(1, n + 1))
            B = gen.standard_normal((n, rank))
            C = B @ B.T
            lhs, rhs = chain_bound(GaussianSystem(C), gen.permutation(n))
            # Hadamard scale: both sides are at most of order prod Var, and are
            # exactly 0 for singular systems, where only round-off remains.
            scale = max(abs(lhs), abs(rhs), float(np.prod(np.diag(C))))
            slack = (lhs - rhs) / scale
            worst = min(worst, slack)
            violations += slack < -1e-9
    ok = violations == 0
    assert report(2, ok, f"{violations} violations, smallest relative slack {worst:.3e}", tm.seconds, 10)


def test_criterion_03_affine_identity(report):
    gen = stream(SEED, "acceptance-3")
    grid = GridSpec(6, 6)
    worst = 0.0
    with Timer() as tm:
        for i in range(100):
            while True:
                A = gen.standard_normal((2, 2))
                if np.linalg.cond(A) < 10:
                    break
            b = gen.standard_normal(2)
            f = sample_field(grid, CovarianceSpec(), stream(SEED, "acc3-field", i))
            for k in (2, 3):
                lhs, rhs = affine_image_silt(f, A, b, SiltConfig(k, 0.05))
                worst = max(worst, abs(lhs - rhs) / abs(rhs))
    ok = worst <= 1e-10
    assert report(3, ok, f"max relative |lhs - rhs| = {worst:.2e} over 200 checks", tm.seconds, 60)


def test_criterion_04_linear_flow_oracle(report):
    f = sample_field(GridSpec(12, 12, layout="left"), CovarianceSpec(), stream(SEED, "acceptance-4"))
    mu = discretize_occupation(f, 4)
    ratios, silt_dev = [], 0.0
    with Timer() as tm:
        for A in (np.diag([1.0, -1.0]), np.eye(2)):
            exact = closed_form_linear_flow(A, mu.mass_center(), mu.points, 1.0)
            errs = []
            for dt in (1e-2, 5e-3, 2.5e-3):
                res = integrate_flow(mu, DriftSpec.linear_center_of_mass(A), FlowConfig(dt, 1.0))
                errs.append(np.abs(res.measure.points - exact).max())
            ratios += [errs[0] / errs[1], errs[1] / errs[2]]
            for k in (2, 3):
                cfg = SiltConfig(k, 0.05)
                base = silt_estimate(f, cfg)[0]
                lhs, _ = affine_image_silt(f, matrix_exp(A, 1.0), np.zeros(2), cfg)
                target = np.exp(-(k - 1) * np.trace(A)) * base
                silt_dev = max(silt_dev, abs(lhs - target) / target)
    ok = all(1.7 <= r <= 2.3 for r in ratios) and silt_dev <= 1e-8
    assert report(4, ok, f"error ratios {np.round(ratios, 3).tolist()}, SILT relative deviation {silt_dev:.1e}",
                  tm.seconds, 60)


def test_criterion_05_stochastic_exponential(report):
    with Timer() as tm:
        out = stochastic_exponential(eps=0.7, t=0.5, replicas=10_000, dt=1e-3, a=0.0, seed=SEED)
    z_det = abs(out["mean_det"] - 1) / out["mean_det_se"]
    z_var = abs(out["step_var"] - out["step_var_target"]) / out["step_var_se"]
    ok = z_det <= 3 and z_var <= 3
    assert report(5, ok, f"E det = {out['mean_det']:.4f} +- {out['mean_det_se']:.4f} (z {z_det:.2f}); "
                         f"step var {out['step_var']:.5e} vs {out['step_var_target']:.5e} (z {z_var:.2f}); "
                         f"log-variance {out['log_var']:.2f}", tm.seconds, 300)


def test_criterion_06_jacobian_crossval(report):
    with Timer() as tm:
        out = jacobian_crossval(100, seed=SEED)
    matched = sum(out["selected"] in r["match"] for r in out["rows"]) if out["selected"] else 0
    ok = out["selected"] in ("paper", "liouville") and matched == 100
    assert report(6, ok, f"selected mode {out['selected']!r} on {matched}/100 paths; max deviation "
                         f"liouville {out['max_dev_liouville']:.4f}, paper {out['max_dev_paper']:.4f}",
                  tm.seconds, 600)


def test_criterion_07_decorrelation(report):
    with Timer() as tm:
        rows = [pair_covariation(1.0, eps, t=1.0, dt=1e-3, replicas=10_000, seed=SEED) for eps in (0.6, 0.3, 0.15)]
    comp = [r["compensator"] for r in rows]
    ok = comp[0] > comp[1] > comp[2] and comp[2] < 0.05
    detail = ", ".join(f"eps {r['eps']}: {r['compensator']:.4f} (realized {r['realized']:.4f} +- {r['realized_se']:.4f})"
                       for r in rows)
    assert report(7, ok, f"covariation per unit time {detail}", tm.seconds, 120)


def test_criterion_08_dispersion(report):
    with Timer() as tm:
        r = dispersion_limit(0.5, [0.1], 500, seed=SEED)[0]
    rel = r.extra["rel_error"]
    ok = abs(rel) <= 0.10
    assert report(8, ok, f"estimate {r.estimate:.4f} +- {r.stderr:.4f} vs 4t + baseline {r.extra['target']:.4f} "
                         f"(relative error {rel:+.3f})", tm.seconds, 600)


def test_criterion_09_time_scaling(report):
    with Timer() as tm:
        recs, fit = time_scaling(1.0, 2, [0.25, 0.5, 0.75], 0.0, 10_000, seed=SEED, dt=5e-3, frozen=True)
    target = C_GRAD * 2 * 1 / 2
    slope_ok = abs(fit["slope"] - target) <= 0.2 * target
    z = [abs(r.extra["weight_mean_scaled"] - 1) / r.extra["weight_mean_scaled_se"] for r in recs]
    ok = slope_ok and max(z) <= 3
    assert report(9, ok, f"slope {fit['slope']:.3f} vs ck(k-1)/2 = {target:.3f} "
                         f"({(fit['slope'] / target - 1):+.3f}); weight-mean |z| {np.round(z, 2).tolist()}",
                  tm.seconds, 900)


def test_criterion_10_martingale(report):
    with Timer() as tm:
        ens, s = martingale_run(k=2, replicas=10_000, t_grid=np.linspace(0, 0.5, 11), seed=SEED)
    ok = s["positive"] and s["max_z"] <= 3 and 0.85 <= s["qv_ratio"] <= 1.15
    assert report(10, ok, f"positive {s['positive']}, max |drift|/SE {s['max_z']:.2f}, "
                          f"realized/formula QV {s['qv_ratio']:.3f}", tm.seconds, 1800)


def test_criterion_11_silt_measure(report):
    grid = GridSpec(20, 20)
    cfg = SiltConfig(2, 0.01)
    worst_mass, worst_change, finite = 0.0, 0.0, True
    with Timer() as tm:
        for i in range(10):
            f = sample_field(grid, CovarianceSpec(), stream(SEED, "acceptance-11", i))
            value = silt_estimate(f, cfg)[0]
            bins = Bins.covering(f.points, 16)
            energies = []
            for b in (bins, bins.refined()):
                nu = self_intersection_measure(f, cfg, b)
                worst_mass = max(worst_mass, abs(nu.total_mass - value) / value)
                energies.append(log_energy(nu, b.width / 2))
            finite &= bool(np.all(np.isfinite(energies)))
            worst_change = max(worst_change, abs(energies[1] - energies[0]) / energies[0])
    ok = worst_mass <= 1e-12 and finite and worst_change < 0.15
    assert report(11, ok, f"max relative mass mismatch {worst_mass:.1e}; log-energy finite {finite}, "
                          f"max change under refinement {worst_change:.3f}", tm.seconds, 60)


def test_criterion_12_hitting(report):
    with Timer() as tm:
        recs, fit = hitting_probability([0.0, 0.0], [0.5, 0.0], 2.0, 0.3, [1, 2, 4, 8], 10_000, seed=SEED, dt=1e-3)
    p = fit["probabilities"]
    dominated = bool(np.all(fit["bound"] >= p - 1e-12))
    ok = fit["nonincreasing"] and fit["ok"] and dominated
    assert report(12, ok, f"P = {np.round(p, 4).tolist()}, envelope c1 {fit['c1']:.4f} c2 {fit['c2']:.4f}, "
                          f"bound dominates {dominated}", tm.seconds, 600)


def test_criterion_13_discretization(report):
    f = sample_field(GridSpec(32, 32, layout="left"), CovarianceSpec(), stream(SEED, "discretization_convergence"))
    with Timer() as tm:
        _, s = discretization_convergence(f, [2, 4, 8, 16], 1.0, DriftSpec.modulated_linear(np.diag([0.5, -0.2]), 1.0))
        _, lin = discretization_convergence(f, [2, 4, 8, 16], 1.0, DriftSpec.linear_center_of_mass(np.diag([0.5, -0.2])))
    diffs = [r[3] for r in s["rows"]]
    ok = s["decreasing"] and s["bounded"]
    assert report(13, ok, f"|I^2n - I^n| = {[f'{d:.2e}' for d in diffs]}, strictly decreasing {s['decreasing']}, "
                          f"bounded with C = {s['C']:.4f}: {s['bounded']}; pure linear drift diffs "
                          f"{[r[3] for r in lin['rows']]}", tm.seconds, 300)
