import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mixshell.errors import DimensionError, ParameterError
from mixshell.shell_model import ShellParams, eval_rhs
from mixshell.tree_model import (
    TreeTopology, make_regular_tree, make_tree_params, tree_divergence_residual, tree_energy,
    tree_energy_quadratic_residual, tree_eval_rhs,
)


@pytest.mark.parametrize("b, depth, Q", [(2, 2, 7), (2, 0, 1), (3, 2, 13), (1, 4, 5)])
def test_regular_tree_sizes(b, depth, Q):
    top = make_regular_tree(b, depth)
    assert top.Q == Q and top.depth == depth and top.M == b
    assert np.all(top.n_children[top.level < depth] == b)
    assert np.all(top.n_children[top.level == depth] == 0)


def test_node_budget():
    with pytest.raises(ParameterError):
        make_regular_tree(2, 30, max_nodes=1000)


def test_level_order_prefix():
    small, big = make_regular_tree(2, 3), make_regular_tree(2, 5)
    np.testing.assert_array_equal(big.parent[: small.Q], small.parent)
    np.testing.assert_array_equal(big.level[: small.Q], small.level)


def test_topology_validation():
    with pytest.raises(ParameterError):
        TreeTopology(np.arange(3), [0, 1, 1], [-1, 0, -1], 2)  # two roots
    with pytest.raises(ParameterError):
        TreeTopology(np.arange(3), [0, 1, 2], [-1, 0, 0], 2)  # wrong level
    with pytest.raises(ParameterError):
        TreeTopology(np.arange(4), [0, 1, 1, 1], [-1, 0, 0, 0], 2)  # too many children
    with pytest.raises(ParameterError):
        TreeTopology([0, 0, 1], [0, 1, 1], [-1, 0, 0], 2)  # duplicate ids


def test_text_round_trip_is_bit_exact():
    top = make_regular_tree(3, 3)
    text = top.to_text()
    again = TreeTopology.from_text(text)
    assert again.to_text() == text
    np.testing.assert_array_equal(again.parent, top.parent)


def test_text_format_irregular_and_shuffled():
    text = "10 0 -1\n11 1 10\n12 1 10\n13 2 12\n"
    lines = text.splitlines()
    shuffled = "\n".join([lines[3], lines[1], lines[0], lines[2]]) + "\n"
    top = TreeTopology.from_text(shuffled)
    assert top.to_text() == text
    np.testing.assert_array_equal(top.n_children, [2, 0, 1, 0])


@pytest.mark.parametrize("bad", ["", "0 0\n", "0 0 -1\n1 1 7\n", "a b c\n", "0 0 -1\n0 1 0\n"])
def test_text_format_errors(bad):
    with pytest.raises(ParameterError):
        TreeTopology.from_text(bad)


def test_proportional_coefficients_examples():
    p = make_tree_params(make_regular_tree(2, 2), 1, 1, 2.0, d_rule="proportional")
    lvl = p.topology.level
    np.testing.assert_array_equal(p.c[lvl == 1], [2, 2])
    np.testing.assert_array_equal(p.d[lvl == 1], [2, 2])
    assert np.all(p.c[lvl != 1] == 0) and np.all(p.d[lvl != 1] == 0)
    q = make_tree_params(make_regular_tree(2, 3), 2, 1, 2.0, d_rule="proportional")
    lvl = q.topology.level
    assert set(q.c[lvl == 1]) == {2} and set(q.d[lvl == 1]) == {4}
    assert set(q.c[lvl == 2]) == {4} and set(q.d[lvl == 2]) == {8}
    assert np.all(q.c[lvl == 3] == 0) and np.all(q.d[lvl == 3] == 0)
    z = make_tree_params(make_regular_tree(2, 3), 0, 1, 2.0, d_rule="proportional")
    assert np.all(z.d == 0) and set(z.c[lvl == 2]) == {4}


def test_divergence_free_coefficients():
    p = make_tree_params(make_regular_tree(2, 3), 1.5, 0.5, 3.0)
    np.testing.assert_allclose(p.coupling_defect(), 0, atol=1e-15)
    lvl = p.topology.level
    np.testing.assert_allclose(p.d[lvl == 1], -1.5 * 3.0 / (0.5 * 2))
    assert np.all(p.c[0] == 0) and np.all(p.d[lvl == 3] == 0)


def test_param_errors():
    top = make_regular_tree(2, 2)
    with pytest.raises(ParameterError):
        make_tree_params(top, 1, 0, 2.0)
    with pytest.raises(ParameterError):
        make_tree_params(top, 1, 1, 1.0)
    with pytest.raises(ParameterError):
        make_tree_params(top, 1, 1, 2.0, d_rule="nope")
    lopsided = TreeTopology.from_text("0 0 -1\n1 1 0\n2 1 0\n3 2 1\n4 3 3\n")
    with pytest.raises(ParameterError):
        make_tree_params(lopsided, 1, 1, 2.0)  # node 2 is childless above the last level


def test_rhs_hand_example():
    p = make_tree_params(make_regular_tree(2, 2), 1, 1, 2.0, d_rule="proportional")
    b = tree_eval_rhs(p, np.ones(7))
    np.testing.assert_array_equal(b, [-4, 6, 6, -2, -2, -2, -2])
    assert tree_energy(np.ones(7)) == 7
    assert float(np.dot(np.ones(7), b)) == 0.0


def test_rhs_trivial_cases(rng):
    p = make_tree_params(make_regular_tree(2, 3), 1, 1, 2.0)
    np.testing.assert_array_equal(tree_eval_rhs(p, np.zeros(15)), 0)
    root = make_tree_params(make_regular_tree(2, 0), 1, 1, 2.0)
    np.testing.assert_array_equal(tree_eval_rhs(root, [3.0]), [0.0])
    with pytest.raises(DimensionError):
        tree_eval_rhs(p, np.zeros(7))


@pytest.mark.parametrize("rule", ["divergence_free", "proportional"])
def test_field_matches_direct_formula(rng, rule):
    p = make_tree_params(make_regular_tree(3, 3), 1.2, -0.7, 2.0, d_rule=rule)
    X = rng.standard_normal((4, p.dim))
    np.testing.assert_allclose(p.field()(X), tree_eval_rhs(p, X), rtol=1e-13, atol=1e-12)


def _fd_trace(b, x, eps=1e-6):
    return sum((b(x + eps * e)[i] - b(x - eps * e)[i]) / (2 * eps) for i, e in enumerate(np.eye(x.size)))


def test_divergence_against_finite_differences(rng):
    p = make_tree_params(make_regular_tree(2, 3), 1, 1, 2.0, d_rule="proportional")
    for _ in range(5):
        x = rng.standard_normal(p.dim)
        fd = _fd_trace(lambda y: tree_eval_rhs(p, y), x)
        assert tree_divergence_residual(p, x) == pytest.approx(fd, rel=1e-7, abs=1e-7)
        assert tree_divergence_residual(p, x) == pytest.approx(-np.dot(p.coupling_defect(), x), rel=1e-12)


def test_conforming_divergence_vanishes(rng):
    p = make_tree_params(make_regular_tree(2, 5), 1, 1, 2.0)
    X = rng.standard_normal((50, p.dim))
    scale = np.abs(p.c).max() * np.linalg.norm(X, axis=1) * p.dim
    assert np.all(np.abs(tree_divergence_residual(p, X)) <= 1e-12 * scale)
    assert tree_divergence_residual(p, np.zeros(p.dim)) == 0.0


@pytest.mark.parametrize("b", [1, 2, 3])
def test_perturbed_d_residual(b):
    beta = 0.75
    p = make_tree_params(make_regular_tree(b, 3), 1, beta, 2.0)
    j = 1  # first level-1 node
    q = p.with_d({j: p.d[j] + 1})
    e = np.zeros(p.dim)
    e[j] = 1.0
    fd = _fd_trace(lambda y: tree_eval_rhs(q, y), 0.3 * np.ones(p.dim)) - _fd_trace(
        lambda y: tree_eval_rhs(p, y), 0.3 * np.ones(p.dim))
    assert tree_divergence_residual(q, e) - tree_divergence_residual(p, e) == pytest.approx(-beta * b)
    assert _fd_trace(lambda y: tree_eval_rhs(q, y), e) - _fd_trace(lambda y: tree_eval_rhs(p, y), e) == \
        pytest.approx(-beta * b, abs=1e-7)
    assert np.isfinite(fd)


def test_chain_tree_matches_shell():
    # branching 1: node at level m is shell m + 1 with k_n = c_{n-1}; divergence-free d gives h = k
    depth = 6
    p = make_tree_params(make_regular_tree(1, depth), 1, 1, 2.0)
    N = depth + 1
    k = np.zeros(N + 2)
    k[2:N + 1] = p.c[1:]
    shell = ShellParams(N, 2.0, k)
    x = np.linspace(-1, 1, N) ** 3 + 0.1
    np.testing.assert_allclose(tree_eval_rhs(p, x), eval_rhs(shell, x), rtol=1e-14, atol=1e-13)
    prop = make_tree_params(make_regular_tree(1, depth), 1, 1, 2.0, d_rule="proportional")
    np.testing.assert_allclose(tree_eval_rhs(prop, x), eval_rhs(ShellParams(N, 2.0, k, h=-k), x),
                               rtol=1e-14, atol=1e-13)


finite = st.floats(-10, 10, allow_nan=False)


@given(arrays(np.float64, 15, elements=finite), st.sampled_from(["divergence_free", "proportional"]),
       st.floats(-2, 2), st.floats(0.1, 2))
def test_energy_conserved_property(x, rule, alpha, beta):
    p = make_tree_params(make_regular_tree(2, 3), alpha, beta, 2.0, d_rule=rule)
    scale = (np.abs(alpha * p.c) + np.abs(beta * p.d)).max() + 1
    assert abs(tree_energy_quadratic_residual(p, x)) <= 1e-12 * scale * np.linalg.norm(x) ** 3 + 1e-300


@given(arrays(np.float64, 13, elements=finite), st.floats(-4, 4))
def test_homogeneous_degree_two(x, a):
    p = make_tree_params(make_regular_tree(3, 2), 1, 1, 2.0)
    np.testing.assert_allclose(tree_eval_rhs(p, a * x), a * a * tree_eval_rhs(p, x), rtol=1e-12, atol=1e-9)
