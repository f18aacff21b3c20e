"""Weighted Sobolev norms on sequence space and time-integrated functionals.

The weight of index ``n`` (0-based position ``e = n - 1``) is
``lam ** (2 s e)``, so the first weight is always 1. For the tree model the
exponent ``e`` is the node's level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .errors import DimensionError, ParameterError
from .field import as_field

H0MINUS_TERMS = 40  # 2**-40 < 1e-12 bounds the neglected tail


@dataclass(frozen=True, eq=False)
class SobolevWeights:
    s: float
    lam: float
    exponents: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 1):
            raise ParameterError(f"lambda must be > 1, got {self.lam}")
        e = np.asarray(self.exponents, dtype=np.float64)
        if e.ndim != 1 or e.size == 0:
            raise ParameterError("exponents must be a nonempty 1-d array")
        e.setflags(write=False)
        object.__setattr__(self, "exponents", e)
        w = self.weights
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ParameterError("weights under/overflow; reduce |s| or the dimension")

    @classmethod
    def shell(cls, s: float, lam: float, dim: int) -> "SobolevWeights":
        return cls(s, lam, np.arange(dim))

    @classmethod
    def tree(cls, s: float, lam: float, topology) -> "SobolevWeights":
        return cls(s, lam, np.asarray(topology.level))

    @property
    def dim(self) -> int:
        return self.exponents.size

    @property
    def weights(self) -> np.ndarray:
        return float(self.lam) ** (2.0 * self.s * self.exponents)

    def at(self, s: float) -> "SobolevWeights":
        return SobolevWeights(s, self.lam, self.exponents)


def hs_norm(w: SobolevWeights, x) -> np.ndarray:
    """``sqrt(sum_n w_n x_n^2)`` over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (w.dim,):
        raise DimensionError(f"vector has trailing dimension {x.shape[-1:]}, weights have {w.dim}")
    return np.sqrt(np.sum(w.weights * x * x, axis=-1))


def interpolation_theta(s0: float, s1: float, s: float) -> float:
    """Exponent with ``|x|_s <= |x|_{s0}^theta |x|_{s1}^(1-theta)`` for ``s1 < s < s0 < 0``."""
    if not s1 < s < s0 < 0:
        raise ParameterError(f"need s1 < s < s0 < 0, got s1={s1}, s={s}, s0={s0}")
    return (s - s1) / (s0 - s1)


def _times_states(traj):
    return np.asarray(traj.times, dtype=np.float64), np.asarray(traj.states, dtype=np.float64)


def lp_time_norms(times, values, p: float) -> np.ndarray:
    """``(int_0^T v(t)^p dt)^(1/p)`` by the trapezoid rule; time runs along the last axis of *values*."""
    if p < 1:
        raise ParameterError(f"p must be >= 1, got {p}")
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if times.size == 1:
        return np.zeros(values.shape[:-1])
    return trapezoid(values**p, times, axis=-1) ** (1.0 / p)


def lp_time_norm(traj, w: SobolevWeights, p: float) -> float:
    """``|x|_{L^p(0,T; H^s)}`` on the stored grid."""
    times, states = _times_states(traj)
    if states.shape[0] == 0:
        raise ParameterError("empty trajectory")
    return float(lp_time_norms(times, hs_norm(w, states), p))


def w1p_time_seminorm(traj, rhs, w: SobolevWeights, p: float) -> float:
    """``|dx/dt|_{L^p(0,T; H^s)}`` with the derivative taken from the field, not differenced."""
    times, states = _times_states(traj)
    if states.shape[0] == 0:
        raise ParameterError("empty trajectory")
    deriv = as_field(rhs)(states)
    return float(lp_time_norms(times, hs_norm(w, deriv), p))


def h0minus_distance(x, y, lam: float, exponents=None) -> float:
    """``sum_{n=1}^{40} 2^-n min(|x - y|_{H^{-1/n}}, 1)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"vectors must share one dimension, got {x.shape} and {y.shape}")
    e = np.arange(x.size) if exponents is None else np.asarray(exponents, dtype=np.float64)
    diff2 = (x - y) ** 2
    total = 0.0
    for n in range(1, H0MINUS_TERMS + 1):
        norm = np.sqrt(np.sum(float(lam) ** (-2.0 * e / n) * diff2))
        total += 2.0**-n * min(norm, 1.0)
    return float(total)


def integral_residual(traj, params, i: int | None = None):
    """``max_t |x_i(t) - x_i(0) - int_0^t b_i(x(s)) ds|`` with cumulative trapezoid quadrature.

    ``i`` is a 0-based component position; ``None`` returns every component.
    Works for any model that exposes a field (shell or tree).
    """
    times, states = _times_states(traj)
    fld = as_field(params)
    if states.shape[1] != fld.dim:
        raise DimensionError(f"trajectory dimension {states.shape[1]} != model dimension {fld.dim}")
    if i is not None and not 0 <= i < fld.dim:
        raise IndexError(f"component {i} outside 0..{fld.dim - 1}")
    b = fld(states)
    integral = cumulative_trapezoid(b, times, axis=0, initial=0.0)
    resid = np.max(np.abs(states - states[0] - integral), axis=0)
    return resid if i is None else float(resid[i])
