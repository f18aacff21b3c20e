import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mixshell.errors import DimensionError, ParameterError
from mixshell.shell_model import (
    ShellParams, divergence_residual, energy, energy_quadratic_residual, eval_rhs, lipschitz_bound,
    make_standard_params,
)


@pytest.mark.parametrize("N, expected", [
    (3, [0, 0, 4, 0, 0]),
    (2, [0, 0, 0, 0]),
    (5, [0, 0, 4, 8, 16, 0, 0]),
])
def test_standard_coefficients(N, expected):
    p = make_standard_params(N, 2.0)
    np.testing.assert_array_equal(p.k, expected)
    assert p.h is None


def test_standard_coefficients_index_loop():
    N, lam = 9, 1.7
    p = make_standard_params(N, lam)
    for n in range(N + 2):
        assert p.k[n] == (lam**n if 1 < n < N else 0.0)


@pytest.mark.parametrize("N, lam", [(1, 2.0), (0, 2.0), (4, 1.0), (4, 0.5), (4, np.nan)])
def test_standard_params_domain(N, lam):
    with pytest.raises(ParameterError):
        make_standard_params(N, lam)


def test_params_validation():
    with pytest.raises(ParameterError):
        ShellParams(3, 2.0, [0, 0, -1, 0, 0])
    with pytest.raises(ParameterError):
        ShellParams(3, 2.0, [0, 0, 1, 0])
    with pytest.raises(ParameterError):
        ShellParams(3, 2.0, [0, 0, 1, 0, 0], h=[0, 0, np.inf, 0, 0])
    p = make_standard_params(4, 2.0)
    with pytest.raises(ValueError):
        p.k[2] = 1.0  # read-only storage


@pytest.mark.parametrize("x, expected", [
    ((1, 1, 1), (-4, 0, 4)),
    ((1, 0, 0), (0, 4, 0)),
    ((0, 0, 0), (0, 0, 0)),
])
def test_eval_rhs_examples(x, expected):
    np.testing.assert_array_equal(eval_rhs(make_standard_params(3, 2.0), x), expected)


def test_eval_rhs_dimension_mismatch():
    with pytest.raises(DimensionError):
        eval_rhs(make_standard_params(3, 2.0), [1.0, 2.0])


def test_field_matches_direct_formula(rng):
    p = make_standard_params(7, 2.0).with_h({3: 5.0, 5: 1.0})
    x = rng.standard_normal(7)
    np.testing.assert_allclose(p.field()(x), eval_rhs(p, x), rtol=1e-14, atol=1e-12)


def test_generalized_field_by_hand():
    # b_n = k_n x_{n-1}^2 - k_{n+1} x_n x_{n+1} - h_n x_{n+1}^2 + h_{n-1} x_{n-1} x_n
    p = make_standard_params(4, 2.0).with_h({2: 5.0})
    x = np.array([1.0, 2.0, 3.0, 4.0])
    k, h = p.k, p.hk
    X = np.concatenate([[0.0], x, [0.0]])
    want = [k[n] * X[n - 1] ** 2 - k[n + 1] * X[n] * X[n + 1] - h[n] * X[n + 1] ** 2 + h[n - 1] * X[n - 1] * X[n]
            for n in range(1, 5)]
    np.testing.assert_allclose(eval_rhs(p, x), want)


@pytest.mark.parametrize("x, expected", [((3, 4), 25), ((0, 0), 0), ((1, 1, 1), 3)])
def test_energy_examples(x, expected):
    assert energy(np.array(x, dtype=float)) == expected


def test_divergence_examples(rng):
    p = make_standard_params(5, 2.0)
    for _ in range(20):
        assert divergence_residual(p, rng.standard_normal(5)) == 0.0
    assert divergence_residual(p, np.zeros(5)) == 0.0
    q = make_standard_params(4, 2.0)
    q = q.with_h({2: q.k[2] + 1})
    assert divergence_residual(q, [0.0, 3.0, 0.0, 0.0]) == 3.0


def _fd_divergence(b, x, r, eps=1e-5):
    """Central-difference sum_i d/dx_i [b_i(x) f(x)] / f(x) for the N(0, r^2) density f."""
    f = lambda y: np.exp(-np.dot(y, y) / (2 * r * r))
    total = 0.0
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        total += (b(x + e)[i] * f(x + e) - b(x - e)[i] * f(x - e)) / (2 * eps)
    return total / f(x)


@pytest.mark.parametrize("updates", [{}, {2: 5.0}, {3: 12.0, 5: 30.0}])
def test_divergence_decomposition_against_finite_differences(rng, updates):
    p = make_standard_params(6, 2.0).with_h(updates)
    r = 1.3
    for _ in range(5):
        x = 0.5 * rng.standard_normal(6)
        fd = _fd_divergence(lambda y: eval_rhs(p, y), x, r)
        exact = -energy_quadratic_residual(p, x) / r**2 + divergence_residual(p, x)
        assert fd == pytest.approx(exact, rel=1e-6, abs=1e-6)


def test_divergence_equals_jacobian_trace(rng):
    p = make_standard_params(8, 2.0).perturbed(3, 1.5)
    x = rng.standard_normal(8)
    assert divergence_residual(p, x) == pytest.approx(p.field().jacobian_trace(x), rel=1e-13)


def test_necessity_every_interior_index():
    N = 8
    base = make_standard_params(N, 2.0)
    for i in range(2, N):
        p = base.perturbed(i, 1.5)
        e = np.zeros(N)
        e[i - 1] = 1.0
        assert divergence_residual(p, e) == pytest.approx(0.5 * base.k[i])
        others = [divergence_residual(p, np.eye(N)[j]) for j in range(N) if j != i - 1]
        assert others == [0.0] * (N - 1)


def test_energy_quadratic_examples(rng):
    assert energy_quadratic_residual(make_standard_params(3, 2.0), np.ones(3)) == 0.0
    p = make_standard_params(16, 2.0)
    for _ in range(100):
        x = rng.standard_normal(16) * rng.uniform(0, 10)
        bound = 1e-10 * np.linalg.norm(x) ** 3 * p.k.max()
        assert abs(energy_quadratic_residual(p, x)) <= bound


def test_generalized_cubic_residual(rng):
    p = make_standard_params(6, 2.0).with_h({2: 1.0, 4: 40.0})
    x = rng.standard_normal(6)
    k, h = p.k, p.hk
    X = np.concatenate([[0.0], x, [0.0]])
    want = sum(k[i] * X[i] * X[i - 1] ** 2 - k[i + 1] * X[i] ** 2 * X[i + 1] - h[i] * X[i] * X[i + 1] ** 2
               + h[i - 1] * X[i - 1] * X[i] ** 2 for i in range(1, 7))
    assert energy_quadratic_residual(p, x) == pytest.approx(want, rel=1e-12)


def test_energy_conserved_for_any_h(rng):
    # the ghost zeros make <x, b(x)> telescope whatever the coefficients are
    p = ShellParams(5, 2.0, rng.uniform(0, 3, 7), h=rng.uniform(-3, 3, 7))
    p = ShellParams(5, 2.0, np.where(np.isin(np.arange(7), [0, 1, 5, 6]), 0.0, p.k),
                    h=np.where(np.isin(np.arange(7), [0, 5, 6]), 0.0, p.h))
    x = rng.standard_normal(5)
    assert abs(energy_quadratic_residual(p, x)) < 1e-12


finite = st.floats(-10, 10, allow_nan=False)


@given(arrays(np.float64, 9, elements=finite), st.floats(-5, 5))
def test_homogeneous_degree_two(x, a):
    p = make_standard_params(9, 2.0)
    np.testing.assert_allclose(eval_rhs(p, a * x), a * a * eval_rhs(p, x), rtol=1e-12, atol=1e-9)


@given(arrays(np.float64, 12, elements=finite))
def test_energy_and_divergence_vanish_property(x):
    p = make_standard_params(12, 2.0)
    nx = np.linalg.norm(x)
    assert abs(energy_quadratic_residual(p, x)) <= 1e-13 * p.k.max() * nx**3 + 1e-300
    assert abs(divergence_residual(p, x)) <= 1e-13 * p.k.max() * nx * 12 + 1e-300


@given(arrays(np.float64, 6, elements=st.floats(-3, 3)))
def test_lipschitz_bound_pointwise(x):
    p = make_standard_params(6, 2.0)
    b = eval_rhs(p, x)
    assert np.all(np.abs(b) <= lipschitz_bound(p, energy(x)) * (1 + 1e-12) + 1e-12)
