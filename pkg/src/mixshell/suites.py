"""Analytic property checks on random states: divergence, energy, interpolation.

Each check returns a dict ``{name, passed, max_residual, tolerance, cases}``
where ``max_residual`` is already divided by the check's scale, so it is
compared directly against ``tolerance``.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .measures import STREAM_MONTE_CARLO, standard_normals
from .norms import SobolevWeights, hs_norm, interpolation_theta
from .shell_model import ShellParams, divergence_residual, energy_quadratic_residual
from .tree_model import TreeParams, tree_divergence_residual, tree_energy_quadratic_residual

CHECKS = ("divergence", "energy", "interpolation")

ENERGY_TOL = 1e-9
DIVERGENCE_TOL = 1e-12
INTERPOLATION_SLACK = 1e-12


def random_states(dim: int, n: int, seed: int, radius: float = 10.0) -> np.ndarray:
    """``n`` states with random directions and norms spread evenly over ``(0, radius]``."""
    z = standard_normals(seed, n, dim, STREAM_MONTE_CARLO)
    norms = np.linalg.norm(z, axis=1)
    target = radius * np.arange(1, n + 1) / n
    return z * (target / norms)[:, None]


def _coef_scale(params) -> float:
    if isinstance(params, ShellParams):
        return float(max(np.max(params.k), np.max(np.abs(params.hk)), 1e-300))
    if isinstance(params, TreeParams):
        top = params.topology
        per_node = np.abs(params.alpha * params.c) + np.abs(params.beta * params.d) * np.maximum(top.n_children, 1)
        return float(max(np.max(per_node), 1e-300))
    raise ParameterError(f"unsupported model parameters {type(params).__name__}")


def divergence_check(params, n_states: int = 1000, seed: int = 0, tol: float = DIVERGENCE_TOL) -> dict:
    """``|div b(x)| <= tol * max|coef| * |x| * dim`` on random states."""
    X = random_states(params.dim, n_states, seed)
    fn = divergence_residual if isinstance(params, ShellParams) else tree_divergence_residual
    res = np.abs(fn(params, X))
    scale = _coef_scale(params) * np.linalg.norm(X, axis=1) * params.dim
    worst = float(np.max(res / scale))
    return {"name": "divergence", "passed": worst <= tol, "max_residual": worst, "tolerance": tol,
            "cases": n_states}


def energy_check(params, n_states: int = 1000, seed: int = 0, tol: float = ENERGY_TOL) -> dict:
    """``|<x, b(x)>| <= tol * max|coef| * |x|^3`` on random states."""
    X = random_states(params.dim, n_states, seed)
    fn = energy_quadratic_residual if isinstance(params, ShellParams) else tree_energy_quadratic_residual
    res = np.abs(fn(params, X))
    scale = _coef_scale(params) * np.linalg.norm(X, axis=1) ** 3
    worst = float(np.max(res / scale))
    return {"name": "energy", "passed": worst <= tol, "max_residual": worst, "tolerance": tol,
            "cases": n_states}


def interpolation_check(lam: float, n_cases: int = 10_000, seed: int = 0, max_dim: int = 64,
                        slack: float = INTERPOLATION_SLACK) -> dict:
    """Sweep ``|x|_s <= |x|_{s0}^theta |x|_{s1}^(1-theta)`` over random vectors and exponents.

    Dimensions, exponents ``s1 < s < s0 < 0`` and vectors are all drawn from
    the Monte Carlo stream, so the sweep is reproducible from ``seed``.
    """
    gen = np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, STREAM_MONTE_CARLO, 1]))
    dims = gen.integers(1, max_dim + 1, size=n_cases)
    expo = -np.sort(gen.uniform(0.01, 3.0, size=(n_cases, 3)), axis=1)  # s0 > s > s1
    violations, worst = 0, -np.inf
    for c in range(n_cases):
        s0, s, s1 = expo[c]
        if not s1 < s < s0:
            continue
        x = gen.standard_normal(dims[c]) * np.exp(gen.uniform(-3, 3))
        theta = interpolation_theta(s0, s1, s)
        w = SobolevWeights.shell(s, lam, dims[c])
        lhs = hs_norm(w, x)
        rhs = hs_norm(w.at(s0), x) ** theta * hs_norm(w.at(s1), x) ** (1 - theta)
        excess = (lhs - rhs) / rhs
        worst = max(worst, excess)
        violations += int(excess > slack)
    return {"name": "interpolation", "passed": bool(violations == 0), "max_residual": float(worst),
            "tolerance": slack, "cases": n_cases, "violations": int(violations)}


def run_checks(params, checks=CHECKS, n_states: int = 1000, n_cases: int = 10_000, seed: int = 0) -> list:
    out = []
    for name in checks:
        if name == "divergence":
            out.append(divergence_check(params, n_states, seed))
        elif name == "energy":
            out.append(energy_check(params, n_states, seed))
        elif name == "interpolation":
            out.append(interpolation_check(params.lam, n_cases, seed))
        else:
            raise ParameterError(f"unknown check {name!r}; choose from {CHECKS}")
    return out
