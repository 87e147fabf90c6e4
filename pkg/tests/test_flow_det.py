import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from siltflow.errors import InputError, NumericalError
from siltflow.field import CovarianceSpec, GridSpec, sample_field
from siltflow.flow_det import (
    DriftSpec,
    FlowConfig,
    bounded_wasserstein,
    closed_form_linear_flow,
    discretize_occupation,
    euler_interaction_step,
    integrate_flow,
    liouville_det,
    matrix_exp,
    write_trajectory_csv,
)
from siltflow.localtime import SiltConfig, affine_image_silt, silt_estimate
from siltflow.measure import EmpiricalMeasure


def cost(u, v):
    d = np.linalg.norm(np.asarray(u) - np.asarray(v))
    return d / (1 + d)


@pytest.fixture(scope="module")
def field():
    return sample_field(GridSpec(32, 32, layout="left"), CovarianceSpec(), 3)


def test_discretize_examples(field):
    m1 = discretize_occupation(field, 1)
    assert len(m1) == 1 and m1.total_mass == 1.0
    assert np.array_equal(m1.points[0], field.values[:, 0])  # node (0, 1)
    for n in (2, 4, 8, 16, 32):
        assert discretize_occupation(field, n).total_mass == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(InputError):
        discretize_occupation(field, 64)


def test_discretize_reads_lattice_nodes(field):
    m = discretize_occupation(field, 4)
    g = field.grid
    vals = field.values
    # atom (k1, k2) = (1, 2) sits at y = 1/4, t = 1 + 2/4
    i = 2 * 4 + 1
    assert np.array_equal(m.points[i], vals[:, g.index(8, 16)])


def test_discretize_interpolates_midpoint_grid():
    f = sample_field(GridSpec(16, 16), CovarianceSpec(), 1)
    m = discretize_occupation(f, 4)
    assert np.isfinite(m.points).all() and m.total_mass == pytest.approx(1.0)


def test_gamma_cauchy_in_n(field):
    g = [bounded_wasserstein(discretize_occupation(field, n), discretize_occupation(field, 2 * n))[0] for n in (2, 4, 8)]
    assert g[0] > g[1] > g[2]


def test_bounded_wasserstein_examples(rng):
    m = EmpiricalMeasure.uniform(rng.standard_normal((5, 2)))
    assert bounded_wasserstein(m, m)[0] == pytest.approx(0.0, abs=1e-12)
    u, v = np.array([0.0, 0.0]), np.array([3.0, 4.0])
    val, exact = bounded_wasserstein(EmpiricalMeasure([u], [1]), EmpiricalMeasure([v], [1]))
    assert exact and val == pytest.approx(5 / 6)
    with pytest.raises(InputError):
        bounded_wasserstein(EmpiricalMeasure([u], [1]), EmpiricalMeasure([v], [2]))


@given(st.integers(0, 2**31))
def test_bounded_wasserstein_permutation_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    best = min(sum(cost(a[i], b[p[i]]) for i in range(3)) / 3 for p in itertools.permutations(range(3)))
    val, exact = bounded_wasserstein(EmpiricalMeasure.uniform(a), EmpiricalMeasure.uniform(b))
    assert exact and val == pytest.approx(best, rel=1e-8, abs=1e-12)


def test_bounded_wasserstein_large_paths(rng):
    a = EmpiricalMeasure.uniform(rng.standard_normal((300, 2)))
    b = EmpiricalMeasure.uniform(rng.standard_normal((300, 2)))
    val, exact = bounded_wasserstein(a, b)
    assert exact
    greedy, exact_g = bounded_wasserstein(a, b, assignment_atoms=10)
    assert not exact_g and greedy >= val - 1e-12


def test_euler_step_examples():
    m = EmpiricalMeasure([[0, 0], [2, 0]], [0.25, 0.75])
    zero = DriftSpec.custom(lambda x, mu: np.zeros_like(x))
    assert np.array_equal(euler_interaction_step(m, zero, 0.1).points, m.points)
    const = DriftSpec.custom(lambda x, mu: np.tile([1.0, -2.0], (len(x), 1)))
    assert np.allclose(euler_interaction_step(m, const, 0.1).points, m.points + [0.1, -0.2])
    # A = 0: both atoms move by m dt with m = (1.5, 0)
    out = euler_interaction_step(m, DriftSpec.linear_center_of_mass(np.zeros((2, 2))), 0.1)
    assert np.allclose(out.points, [[0.15, 0], [2.15, 0]])
    assert np.array_equal(out.weights, m.weights)
    bad = DriftSpec.custom(lambda x, mu: np.where(x[:, :1] > 1, np.nan, 0.0) * np.ones_like(x))
    with pytest.raises(NumericalError, match="atom 1"):
        euler_interaction_step(m, bad, 0.1)


@given(st.integers(0, 2**31), st.floats(1e-4, 0.5))
def test_euler_preserves_mass(seed, dt):
    rng = np.random.default_rng(seed)
    m = EmpiricalMeasure(rng.standard_normal((6, 2)), rng.random(6))
    out = euler_interaction_step(m, DriftSpec.radial_from_center(1.3), dt)
    assert out.total_mass == m.total_mass


def test_closed_form_examples(rng):
    A = rng.standard_normal((2, 2))
    v = rng.standard_normal(2)
    assert np.allclose(closed_form_linear_flow(A, [1, 2], v, 0.0), v, atol=0)
    m0 = np.array([0.3, -0.1])
    assert np.allclose(closed_form_linear_flow(np.zeros((2, 2)), m0, v, 0.8), v + (np.e**0.8 - 1) * m0)
    out = closed_form_linear_flow(np.diag([1.0, -1.0]), [0, 0], [1, 1], 1.0)
    assert np.allclose(out, [np.e, 1 / np.e], rtol=1e-14)


def test_liouville_and_matrix_exp(rng):
    assert liouville_det([[1, 2], [3, -1]], 5.0) == 1.0
    assert liouville_det(np.eye(2), 1.0) == pytest.approx(np.e**2, rel=1e-15)
    A = rng.standard_normal((2, 2))
    assert liouville_det(A, 0.7) == pytest.approx(np.linalg.det(matrix_exp(A, 0.7)), rel=1e-12)
    assert np.array_equal(matrix_exp(np.zeros((2, 2)), 3.0), np.eye(2))
    th = 0.4
    R = matrix_exp([[0, -th], [th, 0]], 1.0)
    assert np.allclose(R, [[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]], rtol=1e-14)


@given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1))
def test_matrix_exp_group_property(seed, s, t):
    A = np.random.default_rng(seed).standard_normal((2, 2))
    assert np.allclose(matrix_exp(A, s + t), matrix_exp(A, s) @ matrix_exp(A, t), rtol=1e-12, atol=1e-12)


def euler_error(A, dt, field):
    mu = discretize_occupation(field, 4)
    res = integrate_flow(mu, DriftSpec.linear_center_of_mass(A), FlowConfig(dt, 1.0))
    exact = closed_form_linear_flow(A, mu.mass_center(), mu.points, 1.0)
    return np.abs(res.measure.points - exact).max()


@pytest.mark.parametrize("A", [np.diag([1.0, -1.0]), np.eye(2), np.array([[0.2, -0.7], [0.5, 0.1]])])
def test_euler_first_order_against_closed_form(A, field):
    e = [euler_error(A, dt, field) for dt in (1e-2, 5e-3, 2.5e-3)]
    for a, b in zip(e[:-1], e[1:]):
        assert 1.7 <= a / b <= 2.3


@pytest.mark.parametrize("A", [np.diag([1.0, -1.0]), np.eye(2)])
@pytest.mark.parametrize("k", [2, 3])
def test_silt_under_linear_flow(A, k):
    f = sample_field(GridSpec(6, 6), CovarianceSpec(), 5)
    cfg = SiltConfig(k, 0.1)
    t = 0.6
    lhs, rhs = affine_image_silt(f, matrix_exp(A, t), np.array([0.4, -0.3]), cfg)
    base = silt_estimate(f, cfg)[0]
    expect = np.exp(-(k - 1) * t * np.trace(A)) * base
    assert lhs == pytest.approx(expect, rel=1e-8)
    assert rhs == pytest.approx(expect, rel=1e-8)


def stability_batch(A, seeds):
    from siltflow.experiments import interaction_stability

    drift = DriftSpec.linear_center_of_mass(A)
    grid = GridSpec(16, 16, layout="left")
    return [interaction_stability(sample_field(grid, CovarianceSpec(), s), drift, n=4, m=8, t=1.0) for s in seeds]


def test_stability_constant_is_stable_across_batches():
    from siltflow.experiments import fit_stability_constant

    A = np.array([[0.3, -0.5], [0.4, -0.2]])
    fits = [fit_stability_constant(stability_batch(A, range(1000 + 40 * b, 1040 + 40 * b)))["C"] for b in range(4)]
    fits = np.array(fits)
    assert np.all(np.abs(fits / fits.mean() - 1) <= 0.2)


def test_displacement_bounded_by_lipschitz_constant():
    # linear drift: x^mu - x^nu = (e^t - 1) e^{At} (m_mu - m_nu), |m_mu - m_nu| <= W1 <= (1 + D) gamma
    A = np.array([[0.3, -0.5], [0.4, -0.2]])
    L = np.linalg.norm((np.e - 1) * matrix_exp(A, 1.0), 2)
    grid = GridSpec(16, 16, layout="left")
    for s, r in zip(range(10), stability_batch(A, range(10))):
        f = sample_field(grid, CovarianceSpec(), s)
        a, b = discretize_occupation(f, 4).points, discretize_occupation(f, 8).points
        D = np.linalg.norm(a[:, None] - b[None], axis=-1).max()
        assert r["displacement"] <= 1.05 * L * (1 + D) * r["gamma"]  # 5% covers the O(dt) Euler error


def test_probes_track_trace_integral(field):
    mu = discretize_occupation(field, 4)
    A = np.array([[0.5, 0.1], [0.0, 0.3]])
    res = integrate_flow(mu, DriftSpec.linear_center_of_mass(A), FlowConfig(0.01, 0.5), probes=mu.points[:3])
    assert np.allclose(res.log_det, 0.5 * np.trace(A))
    assert np.allclose(res.probes, res.measure.points[:3])


def test_trajectory_csv(tmp_path, field):
    mu = discretize_occupation(field, 2)
    res = integrate_flow(mu, DriftSpec.radial_from_center(1.0), FlowConfig(0.1, 0.3, record_every=1))
    write_trajectory_csv(tmp_path / "tr.csv", res, mu.weights)
    lines = (tmp_path / "tr.csv").read_text().splitlines()
    assert lines[0] == "t,atom_id,x,y,weight"
    assert len(lines) == 1 + 4 * 4
