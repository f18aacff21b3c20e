"""Sparse polynomial vector fields of degree <= 2.

Both models compile down to a :class:`PolynomialField`: a list of linear
terms ``out[i] += a * x[j]`` and quadratic terms ``out[i] += c * x[j] * x[l]``.
The integrator kernels only ever see these flat term arrays, which keeps the
hot loop model-agnostic and numba-friendly.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numba as nb
import numpy as np

from .errors import DimensionError, ParameterError


@nb.njit(cache=True, nogil=True)
def eval_terms(li, lj, la, qi, qj, ql, qc, x, out):
    for n in range(out.shape[0]):
        out[n] = 0.0
    for m in range(li.shape[0]):
        out[li[m]] += la[m] * x[lj[m]]
    for m in range(qi.shape[0]):
        out[qi[m]] += qc[m] * x[qj[m]] * x[ql[m]]


@nb.njit(cache=True, nogil=True)
def _eval_rows(li, lj, la, qi, qj, ql, qc, xs, out):
    for r in range(xs.shape[0]):
        eval_terms(li, lj, la, qi, qj, ql, qc, xs[r], out[r])


def _as_int(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.int64).reshape(-1))


def _as_float(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1))


@dataclass(frozen=True)
class PolynomialField:
    """Autonomous field ``b(x)`` with linear and quadratic sparse terms.

    ``stiffness`` is a coefficient scale used only to pick a default initial
    step, ``0.1 / (stiffness * (1 + |x0|))``.
    """

    dim: int
    lin_i: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, np.int64))
    lin_j: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, np.int64))
    lin_a: np.ndarray = dc_field(default_factory=lambda: np.zeros(0))
    quad_i: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, np.int64))
    quad_j: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, np.int64))
    quad_l: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, np.int64))
    quad_c: np.ndarray = dc_field(default_factory=lambda: np.zeros(0))
    stiffness: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise ParameterError(f"field dimension must be positive, got {self.dim}")
        for name in ("lin_i", "lin_j", "quad_i", "quad_j", "quad_l"):
            object.__setattr__(self, name, _as_int(getattr(self, name)))
        for name in ("lin_a", "quad_c"):
            object.__setattr__(self, name, _as_float(getattr(self, name)))
        if not (self.lin_i.size == self.lin_j.size == self.lin_a.size):
            raise ParameterError("linear term arrays differ in length")
        if not (self.quad_i.size == self.quad_j.size == self.quad_l.size == self.quad_c.size):
            raise ParameterError("quadratic term arrays differ in length")
        for name in ("lin_i", "lin_j", "quad_i", "quad_j", "quad_l"):
            idx = getattr(self, name)
            if idx.size and (idx.min() < 0 or idx.max() >= self.dim):
                raise ParameterError(f"{name} has indices outside [0, {self.dim})")
        if not (np.all(np.isfinite(self.lin_a)) and np.all(np.isfinite(self.quad_c))):
            raise ParameterError("field coefficients must be finite")
        if not self.stiffness > 0:
            object.__setattr__(self, "stiffness", 1.0)

    @classmethod
    def quadratic(cls, dim, terms, stiffness=None) -> "PolynomialField":
        """Build from an iterable of ``(i, j, l, coef)``; zero coefficients are dropped."""
        rows = [(i, j, l, c) for i, j, l, c in terms if c != 0.0]
        arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
        coefs = arr[:, 3]
        scale = stiffness if stiffness is not None else (np.abs(coefs).max() if coefs.size else 1.0)
        return cls(
            dim=dim,
            quad_i=arr[:, 0],
            quad_j=arr[:, 1],
            quad_l=arr[:, 2],
            quad_c=coefs,
            stiffness=float(scale),
        )

    @classmethod
    def linear(cls, matrix) -> "PolynomialField":
        """Field ``b(x) = A x`` from a dense square matrix."""
        a = np.asarray(matrix, dtype=np.float64)
        i, j = np.nonzero(a)
        scale = np.abs(a).max() if a.size else 1.0
        return cls(dim=a.shape[0], lin_i=i, lin_j=j, lin_a=a[i, j], stiffness=float(scale) or 1.0)

    @property
    def arrays(self):
        return (self.lin_i, self.lin_j, self.lin_a, self.quad_i, self.quad_j, self.quad_l, self.quad_c)

    def negated(self) -> "PolynomialField":
        return PolynomialField(
            self.dim, self.lin_i, self.lin_j, -self.lin_a,
            self.quad_i, self.quad_j, self.quad_l, -self.quad_c, self.stiffness,
        )

    def __call__(self, x) -> np.ndarray:
        """Evaluate on one state ``(dim,)`` or a batch ``(..., dim)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"state has dimension {x.shape[-1]}, field expects {self.dim}")
        if x.ndim == 1:
            out = np.empty(self.dim)
            eval_terms(*self.arrays, np.ascontiguousarray(x), out)
            return out
        flat = np.ascontiguousarray(x.reshape(-1, self.dim))
        out = np.empty_like(flat)
        _eval_rows(*self.arrays, flat, out)
        return out.reshape(x.shape)

    def jacobian_trace(self, x) -> float:
        """Divergence ``sum_i d b_i / d x_i`` evaluated exactly from the terms."""
        x = np.asarray(x, dtype=np.float64)
        total = float(np.sum(self.lin_a[self.lin_i == self.lin_j]))
        # d/dx_i of c x_j x_l contributes c x_l when j == i and c x_j when l == i
        qj_hit = self.quad_j == self.quad_i
        ql_hit = self.quad_l == self.quad_i
        total += float(np.sum(self.quad_c[qj_hit] * x[self.quad_l[qj_hit]]))
        total += float(np.sum(self.quad_c[ql_hit] * x[self.quad_j[ql_hit]]))
        return total


def as_field(obj) -> PolynomialField:
    """Accept a field or any model object exposing ``.field()``."""
    if isinstance(obj, PolynomialField):
        return obj
    make = getattr(obj, "field", None)
    if callable(make):
        return make()
    raise TypeError(f"cannot interpret {type(obj).__name__} as a vector field")
