import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from siltflow.errors import InputError
from siltflow.field import CovarianceSpec, GridSpec
from siltflow.gram import (
    GaussianSystem,
    VarianceFloorParams,
    chain_bound,
    conditional_variance,
    differencing_matrix,
    fit_floor_constant,
    gram_determinant,
    increment_gram,
    variance_floor,
)


def random_psd(rng, n, rank=None):
    rank = n if rank is None else rank
    B = rng.standard_normal((n, rank))
    return B @ B.T


def test_gram_determinant_examples():
    s = GaussianSystem(np.diag([2.0, 3.0, 5.0]))
    assert gram_determinant(s, [1]) == pytest.approx(3.0, rel=1e-14)
    assert gram_determinant(GaussianSystem(np.eye(4)), [0, 2, 3]) == pytest.approx(1.0)
    assert gram_determinant(GaussianSystem([[2, -1], [-1, 2]]), [0, 1]) == pytest.approx(3.0)
    with pytest.raises(InputError):
        gram_determinant(s, [])


def test_system_validation():
    with pytest.raises(InputError):
        GaussianSystem([[1, 0.5], [0.4, 1]])
    with pytest.raises(InputError):
        GaussianSystem([[1, 2], [2, 1]])


def test_conditional_variance_examples():
    assert conditional_variance(GaussianSystem(np.diag([2.0, 3.0])), 1, [0]) == pytest.approx(3.0)
    assert conditional_variance(GaussianSystem(np.ones((2, 2))), 1, [0]) == pytest.approx(0.0, abs=1e-9)
    assert conditional_variance(GaussianSystem([[1, 0.5], [0.5, 1]]), 1, [0]) == pytest.approx(0.75)
    assert conditional_variance(GaussianSystem(np.diag([2.0, 3.0])), 0) == 2.0


def test_increment_gram_examples(rng):
    assert increment_gram(GaussianSystem(np.eye(2)), [0, 1]) == pytest.approx(2.0)
    assert increment_gram(GaussianSystem(np.eye(3)), [0, 1, 2]) == pytest.approx(3.0)
    C = random_psd(rng, 5)
    D = differencing_matrix(5)
    assert increment_gram(GaussianSystem(C), range(5)) == pytest.approx(np.linalg.det(D @ C @ D.T), rel=1e-10)


@pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
def test_chain_bound_iid_closed_form(k):
    lhs, rhs = chain_bound(GaussianSystem(np.eye(k)), range(k))
    assert lhs == pytest.approx(k)
    assert rhs == pytest.approx(1.0)


def test_chain_bound_degenerate():
    lhs, rhs = chain_bound(GaussianSystem(np.ones((3, 3))), [0, 1, 2])
    assert lhs == pytest.approx(0.0, abs=1e-12)
    assert rhs == pytest.approx(0.0, abs=1e-9)


@given(st.integers(2, 6), st.integers(0, 2**32 - 1), st.booleans())
def test_chain_bound_inequality(n, seed, deficient):
    rng = np.random.default_rng(seed)
    C = random_psd(rng, n, rank=max(1, n - 1) if deficient else n)
    order = rng.permutation(n)
    lhs, rhs = chain_bound(GaussianSystem(C), order)
    assert lhs >= rhs - 1e-9 * max(1.0, abs(lhs))


@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_gram_monotone_under_conditioning(n, seed):
    rng = np.random.default_rng(seed)
    C = random_psd(rng, n)
    s = GaussianSystem(C)
    S = list(range(n - 1))
    j = n - 1
    tr = np.trace(C)
    assert gram_determinant(s, S + [j]) <= gram_determinant(s, S) * C[j, j] + 1e-10 * tr**n
    assert gram_determinant(s, S) >= -1e-10 * tr ** len(S)


def test_conditional_variance_matches_inverse_formula(rng):
    C = random_psd(rng, 5)
    s = GaussianSystem(C)
    for t in range(5):
        g = [i for i in range(5) if i != t]
        direct = 1.0 / np.linalg.inv(C)[t, t]
        assert conditional_variance(s, t, g) == pytest.approx(direct, rel=1e-8)


def test_variance_floor_examples():
    p = VarianceFloorParams(K=1.0, alpha=1.0)
    assert variance_floor(0.0, 0.0, 1.5, p) == 0.0
    assert variance_floor(0.0, 0.2, 1.5, p) == pytest.approx(0.1)
    assert variance_floor(0.1, 0.0, 1.0, p) == pytest.approx(0.01)
    with pytest.raises(InputError):
        variance_floor(0.6, 0.0, 1.0, p)
    with pytest.raises(InputError):
        variance_floor(0.1, 0.0, 3.0, p)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5])
def test_fitted_floor_bounds_measured_variance(alpha):
    g = GridSpec(10, 10)
    node = g.index(5, 5)
    deltas = [(d1, d2) for d1, d2 in itertools.product([0.1, 0.2, 0.3], [0.0, 0.1, 0.2])]
    res = fit_floor_constant(g, CovarianceSpec(alpha), node, deltas)
    assert res["K"] > 0
    assert res["max_floor_ratio"] <= 1.0 + 1e-12
