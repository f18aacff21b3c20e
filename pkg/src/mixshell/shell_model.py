"""Galerkin-truncated mixed shell model.

Mode ``n`` (1-based, ``n = 1..N``) evolves as::

    dX_n/dt = k_n X_{n-1}^2 - k_{n+1} X_n X_{n+1} - h_n X_{n+1}^2 + h_{n-1} X_{n-1} X_n

with ghost values ``X_0 = X_{N+1} = 0``. The standard model has ``h = k``,
``k_n = lambda**n`` for ``1 < n < N`` and ``k_0 = k_1 = k_N = k_{N+1} = 0``.

Coefficient arrays have length ``N + 2`` and are indexed by shell number, so
``k[n]`` is the coefficient of shell ``n``. State vectors have length ``N``
and are indexed from 0, so ``x[n - 1]`` holds ``X_n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .field import PolynomialField


@dataclass(frozen=True, eq=False)
class ShellParams:
    N: int
    lam: float
    k: np.ndarray
    h: np.ndarray | None = None

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ParameterError(f"N must be a positive integer, got {self.N}")
        object.__setattr__(self, "N", int(self.N))
        k = np.array(self.k, dtype=np.float64)
        if k.shape != (self.N + 2,):
            raise ParameterError(f"k must have length N+2={self.N + 2}, got shape {k.shape}")
        if not np.all(np.isfinite(k)) or np.any(k < 0):
            raise ParameterError("k entries must be finite and nonnegative")
        k.setflags(write=False)
        object.__setattr__(self, "k", k)
        if self.h is not None:
            h = np.array(self.h, dtype=np.float64)
            if h.shape != k.shape:
                raise ParameterError(f"h must have the shape of k, got {h.shape}")
            if not np.all(np.isfinite(h)):
                raise ParameterError("h entries must be finite")
            h.setflags(write=False)
            object.__setattr__(self, "h", h)

    @property
    def hk(self) -> np.ndarray:
        """The Obukhov-side coefficients actually in use (``k`` when ``h`` is absent)."""
        return self.k if self.h is None else self.h

    @property
    def dim(self) -> int:
        return self.N

    def with_h(self, updates) -> "ShellParams":
        """Copy with ``h[n] = value`` for each ``n -> value`` in *updates*."""
        h = np.array(self.hk)
        for n, value in dict(updates).items():
            if not 0 <= n <= self.N + 1:
                raise ParameterError(f"h index {n} outside 0..{self.N + 1}")
            h[n] = value
        return ShellParams(self.N, self.lam, self.k, h)

    def perturbed(self, index: int, multiplier: float) -> "ShellParams":
        """Copy with ``h[index] = multiplier * k[index]``."""
        return self.with_h({index: multiplier * self.k[index]})

    def field(self) -> PolynomialField:
        k, h, N = self.k, self.hk, self.N
        terms = []
        for n in range(1, N + 1):
            i = n - 1
            if n > 1:
                terms.append((i, i - 1, i - 1, k[n]))
                terms.append((i, i - 1, i, h[n - 1]))
            if n < N:
                terms.append((i, i, i + 1, -k[n + 1]))
                terms.append((i, i + 1, i + 1, -h[n]))
        return PolynomialField.quadratic(N, terms, stiffness=float(self.lam) ** N)

    def as_dict(self) -> dict:
        out = {"model": "shell", "N": self.N, "lambda": float(self.lam), "k": self.k.tolist()}
        if self.h is not None:
            out["h"] = self.h.tolist()
        return out


def make_standard_params(N: int, lam: float) -> ShellParams:
    """Standard truncation: ``k_n = lam**n`` for ``1 < n < N``, zero at 0, 1, N, N+1."""
    if int(N) != N or N < 2:
        raise ParameterError(f"N must be an integer >= 2, got {N}")
    if not np.isfinite(lam) or lam <= 1:
        raise ParameterError(f"lambda must be > 1, got {lam}")
    N = int(N)
    k = np.zeros(N + 2)
    for n in range(2, N):
        k[n] = float(lam) ** n
    return ShellParams(N, float(lam), k)


def check_state(params: ShellParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (params.N,):
        raise DimensionError(f"state has shape {x.shape}, expected trailing dimension {params.N}")
    return x


def _padded(x: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * (x.ndim - 1) + [(1, 1)]
    return np.pad(x, pad)


def eval_rhs(params: ShellParams, x) -> np.ndarray:
    """Vector field ``b(x)``; accepts a single state or a batch ``(..., N)``."""
    x = check_state(params, x)
    xp = _padded(x)
    k, h = params.k, params.hk
    lo, mid, hi = xp[..., :-2], xp[..., 1:-1], xp[..., 2:]
    kn, kn1 = k[1:-1], k[2:]
    hn, hn1 = h[1:-1], h[:-2]
    return kn * lo**2 - kn1 * mid * hi - hn * hi**2 + hn1 * lo * mid


def energy(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.dot(x, x)) if x.ndim == 1 else np.sum(x * x, axis=-1)


def divergence_residual(params: ShellParams, x) -> float:
    """Trace of the Jacobian of ``b``: ``sum_n (-k_{n+1} x_{n+1} + h_{n-1} x_{n-1})``.

    Together with ``<x, b(x)>`` this determines ``div(b f) / f`` for a
    centred Gaussian density ``f``; it vanishes identically iff ``h = k`` on
    the interior shells and ``h_1 = k_N = 0``.
    """
    x = check_state(params, x)
    return x @ divergence_coefficients(params)


def divergence_coefficients(params: ShellParams) -> np.ndarray:
    """``a`` with ``divergence_residual(x) = a . x``: ``a_i = h_i [i < N] - k_i [i > 1]``.

    Each entry is a single subtraction, so it is exactly zero for standard
    coefficients and the residual vanishes exactly, not just to roundoff.
    """
    N, k, h = params.N, params.k, params.hk
    idx = np.arange(1, N + 1)
    return np.where(idx < N, h[1:-1], 0.0) - np.where(idx > 1, k[1:-1], 0.0)


def energy_quadratic_residual(params: ShellParams, x) -> float:
    """``<x, b(x)>``, i.e. half the time derivative of the energy."""
    x = check_state(params, x)
    return np.sum(x * eval_rhs(params, x), axis=-1)


def lipschitz_bound(params: ShellParams, energy0: float) -> np.ndarray:
    """A-priori bound on ``|dX_n/dt|`` given the conserved energy.

    For ``h = k`` this is ``E(0) * (2 k_n + k_{n+1} + k_{n-1})``.
    """
    k, h = params.k, np.abs(params.hk)
    return energy0 * (k[1:-1] + k[2:] + h[1:-1] + h[:-2])
