"""Explicit Runge-Kutta integration of polynomial fields.

Two methods are available: classical fixed-step RK4 (``rk4_fixed``) and the
Dormand-Prince 5(4) embedded pair with local extrapolation
(``rk45_adaptive``). A step is accepted when the embedded error estimate
satisfies ``|err|_2 <= abs_tol + rel_tol * max(|x_n|_2, |x_{n+1}|_2)``.
By default (``dense_output="steps"``) the adaptive method shortens a step
whenever it would pass an output time, so every stored sample is an accepted
step. With ``dense_output="hermite"`` the steps ignore the grid, which is
then filled by cubic Hermite interpolation between accepted steps; that keeps
the step sequence grid-independent, at the price of an O(h^4) interpolation
error on the samples. Fixed-step RK4 always uses Hermite output.

The per-trajectory kernel is compiled with numba. Ensembles call the same
kernel once per sample, so an ensemble member is bit-identical to a solo run
from the same initial condition, whatever the thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace

import numba as nb
import numpy as np

from .errors import IntegrationError, ParameterError
from .field import as_field, eval_terms

METHODS = ("rk4_fixed", "rk45_adaptive")
DENSE_OUTPUT = ("steps", "hermite")

OK, MAX_STEPS, NONFINITE, UNDERFLOW = 0, 1, 2, 3
_STATUS_TEXT = {
    MAX_STEPS: "step budget exhausted",
    NONFINITE: "non-finite state (overflow or NaN)",
    UNDERFLOW: "step size underflow",
}

# Dormand-Prince 5(4) tableau
_A = np.array([
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1 / 5, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3 / 40, 9 / 40, 0.0, 0.0, 0.0, 0.0],
    [44 / 45, -56 / 15, 32 / 9, 0.0, 0.0, 0.0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0.0, 0.0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0.0],
])
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# fifth-order weights minus the embedded fourth-order weights
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


@nb.njit(cache=True, nogil=True)
def _norm2(v):
    s = 0.0
    for i in range(v.shape[0]):
        s += v[i] * v[i]
    return math.sqrt(s)


@nb.njit(cache=True, nogil=True)
def _finite(v):
    for i in range(v.shape[0]):
        if not math.isfinite(v[i]):
            return False
    return True


@nb.njit(cache=True, nogil=True)
def _emit(grid, gi, t0, t1, x0, f0, x1, f1, out):
    """Write every grid point in (t0, t1] by cubic Hermite interpolation."""
    h = t1 - t0
    D = x0.shape[0]
    while gi < grid.shape[0] and grid[gi] <= t1:
        g = grid[gi]
        if g == t1:
            for i in range(D):
                out[gi, i] = x1[i]
        else:
            th = (g - t0) / h
            a0 = (1.0 + 2.0 * th) * (1.0 - th) ** 2
            b0 = th * (1.0 - th) ** 2 * h
            a1 = th * th * (3.0 - 2.0 * th)
            b1 = th * th * (th - 1.0) * h
            for i in range(D):
                out[gi, i] = a0 * x0[i] + b0 * f0[i] + a1 * x1[i] + b1 * f1[i]
        gi += 1
    return gi


@nb.njit(cache=True, nogil=True)
def _run(li, lj, la, qi, qj, ql, qc, x0, T, grid, method, atol, rtol, max_steps, dt0, stiffness,
         A, B, E, out, info):
    """Integrate one trajectory; fills ``out`` (G, D) and ``info``.

    info = [status, t_reached, accepted, rejected, rhs_evals, last_dt]
    method: 0 fixed RK4, 1 DOPRI with Hermite output, 2 DOPRI stepping onto the grid
    """
    D = x0.shape[0]
    K = np.zeros((7, D))
    x = x0.copy()
    x1 = np.zeros(D)
    y = np.zeros(D)
    f0 = np.zeros(D)
    f1 = np.zeros(D)
    t = 0.0
    gi = 0
    while gi < grid.shape[0] and grid[gi] <= 0.0:
        for i in range(D):
            out[gi, i] = x0[i]
        gi += 1
    if dt0 <= 0.0:
        dt0 = 0.1 / (stiffness * (1.0 + _norm2(x0)))
    eval_terms(li, lj, la, qi, qj, ql, qc, x, f0)
    evals = 1
    accepted = 0
    rejected = 0
    status = 0
    h = dt0
    if not _finite(x) or not _finite(f0):
        status = 2
        T = 0.0

    if method == 0:
        n = int(math.ceil(T / dt0 - 1e-9)) if T > 0.0 else 0
        if n < 1 and T > 0.0:
            n = 1
        h = T / n if n > 0 else 0.0
        for s in range(n):
            if accepted >= max_steps:
                status = 1
                break
            for i in range(D):
                y[i] = x[i] + 0.5 * h * f0[i]
            eval_terms(li, lj, la, qi, qj, ql, qc, y, K[1])
            for i in range(D):
                y[i] = x[i] + 0.5 * h * K[1, i]
            eval_terms(li, lj, la, qi, qj, ql, qc, y, K[2])
            for i in range(D):
                y[i] = x[i] + h * K[2, i]
            eval_terms(li, lj, la, qi, qj, ql, qc, y, K[3])
            for i in range(D):
                x1[i] = x[i] + h * (f0[i] + 2.0 * K[1, i] + 2.0 * K[2, i] + K[3, i]) / 6.0
            eval_terms(li, lj, la, qi, qj, ql, qc, x1, f1)
            evals += 4
            if not _finite(x1) or not _finite(f1):
                status = 2
                break
            t1 = T if s == n - 1 else (s + 1) * h
            gi = _emit(grid, gi, t, t1, x, f0, x1, f1, out)
            t = t1
            accepted += 1
            for i in range(D):
                x[i] = x1[i]
                f0[i] = f1[i]
    else:
        last_rejected = False
        clip = method == 2
        while t < T:
            if accepted + rejected >= max_steps:
                status = 1
                break
            if h < 1e-15 * max(1.0, abs(t)) * 4.0:
                status = 3
                break
            # clip the step to the next output time so stored samples are actual steps
            target = grid[gi] if clip and gi < grid.shape[0] else T
            hit = False
            h_free = h
            if t + h >= target:
                h = target - t
                hit = True
            for i in range(D):
                K[0, i] = f0[i]
            for s in range(1, 6):
                for i in range(D):
                    acc = x[i]
                    for q in range(s):
                        acc += h * A[s, q] * K[q, i]
                    y[i] = acc
                eval_terms(li, lj, la, qi, qj, ql, qc, y, K[s])
            for i in range(D):
                acc = x[i]
                for q in range(6):
                    acc += h * B[q] * K[q, i]
                x1[i] = acc
            eval_terms(li, lj, la, qi, qj, ql, qc, x1, K[6])
            evals += 6
            errsq = 0.0
            for i in range(D):
                e = 0.0
                for q in range(7):
                    e += E[q] * K[q, i]
                e *= h
                errsq += e * e
            scale = atol + rtol * max(_norm2(x), _norm2(x1))
            err = math.sqrt(errsq) / scale
            if not math.isfinite(err) or not _finite(x1):
                rejected += 1
                last_rejected = True
                h *= 0.2
                continue
            if err <= 1.0:
                t1 = target if hit else t + h
                for i in range(D):
                    f1[i] = K[6, i]
                gi = _emit(grid, gi, t, t1, x, f0, x1, f1, out)
                t = t1
                for i in range(D):
                    x[i] = x1[i]
                    f0[i] = f1[i]
                accepted += 1
                fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
                if last_rejected:
                    fac = min(fac, 1.0)
                last_rejected = False
                h = max(h * fac, h_free) if hit else h * fac
            else:
                rejected += 1
                last_rejected = True
                h *= max(0.2, 0.9 * err ** -0.2)
    if status != 0:
        # leave unreached grid samples as NaN so nothing downstream mistakes them for data
        while gi < grid.shape[0]:
            for i in range(D):
                out[gi, i] = np.nan
            gi += 1
    info[0] = status
    info[1] = t
    info[2] = accepted
    info[3] = rejected
    info[4] = evals
    info[5] = h


@nb.njit(cache=True, parallel=True)
def _run_many(li, lj, la, qi, qj, ql, qc, X0, T, grid, method, atol, rtol, max_steps, dt0, stiffness,
              A, B, E, OUT, INFO):
    for m in nb.prange(X0.shape[0]):
        _run(li, lj, la, qi, qj, ql, qc, X0[m], T, grid, method, atol, rtol, max_steps, dt0,
             stiffness, A, B, E, OUT[m], INFO[m])


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk45_adaptive"
    abs_tol: float = 1e-10
    rel_tol: float = 1e-10
    max_steps: int = 20_000_000
    initial_dt: float | None = None
    output_grid: tuple | None = None
    n_out: int = 100
    dense_output: str = "steps"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"method must be one of {METHODS}, got {self.method!r}")
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ParameterError("tolerances must be positive")
        if int(self.max_steps) != self.max_steps or self.max_steps < 1:
            raise ParameterError("max_steps must be a positive integer")
        if self.initial_dt is not None and not self.initial_dt > 0:
            raise ParameterError("initial_dt must be positive")
        if self.dense_output not in DENSE_OUTPUT:
            raise ParameterError(f"dense_output must be one of {DENSE_OUTPUT}, got {self.dense_output!r}")
        if self.n_out < 1:
            raise ParameterError("n_out must be >= 1")
        if self.output_grid is not None:
            g = np.asarray(self.output_grid, dtype=np.float64)
            if g.ndim != 1 or g.size == 0 or np.any(np.diff(g) <= 0) or g[0] < 0:
                raise ParameterError("output_grid must be a nonempty strictly increasing array >= 0")
            object.__setattr__(self, "output_grid", tuple(float(v) for v in g))

    def grid(self, T: float) -> np.ndarray:
        if self.output_grid is None:
            return np.linspace(0.0, T, self.n_out + 1)
        g = np.array(self.output_grid)
        if g[-1] > T * (1 + 1e-12):
            raise ParameterError(f"output grid extends past T={T}")
        g = np.minimum(g, T)
        if g[0] > 0:
            g = np.concatenate([[0.0], g])
        return g

    def with_grid(self, grid) -> "IntegratorConfig":
        return replace(self, output_grid=tuple(np.asarray(grid, dtype=float)))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (G, D)
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] != self.times.size:
            raise ParameterError("states must have shape (len(times), D)")
        if self.times.size and (self.times[0] != 0 or np.any(np.diff(self.times) <= 0)):
            raise ParameterError("times must start at 0 and increase strictly")

    @property
    def dim(self) -> int:
        return self.states.shape[1]


@dataclass
class EnsembleRun:
    """Integrated ensemble: ``states[m, g, :]`` is sample ``m`` at ``times[g]``."""

    times: np.ndarray
    states: np.ndarray  # (M, G, D)
    info: np.ndarray  # (M, 6), raw kernel diagnostics
    meta: dict = dc_field(default_factory=dict)

    @property
    def status(self) -> np.ndarray:
        return self.info[:, 0].astype(int)

    def failures(self) -> list:
        """``(sample index, t_reached, reason)`` for every sample that failed."""
        bad = np.flatnonzero(self.status != OK)
        return [(int(m), float(self.info[m, 1]), _STATUS_TEXT[int(self.info[m, 0])]) for m in bad]

    def trajectory(self, m: int) -> Trajectory:
        return Trajectory(self.times, self.states[m], dict(self.meta, accepted=int(self.info[m, 2]),
                                                          rejected=int(self.info[m, 3])))


def _prepare(rhs, T, config):
    if not (np.isfinite(T) and T >= 0):
        raise ParameterError(f"T must be finite and >= 0, got {T}")
    config = config or IntegratorConfig()
    fld = as_field(rhs)
    grid = np.ascontiguousarray(config.grid(T))
    method = 0 if config.method == "rk4_fixed" else (2 if config.dense_output == "steps" else 1)
    dt0 = -1.0 if config.initial_dt is None else float(config.initial_dt)
    return fld, config, grid, method, dt0


def _tableau():
    return _A, _B, _E


def integrate(rhs, x0, T: float, config: IntegratorConfig | None = None) -> Trajectory:
    """Integrate ``dx/dt = rhs(x)`` from ``x0`` over ``[0, T]``.

    ``rhs`` is a :class:`~mixshell.field.PolynomialField` or a model
    parameter object (``ShellParams``/``TreeParams``). Raises
    :class:`IntegrationError` when the step budget runs out, the state stops
    being finite, or the step size underflows.
    """
    fld, config, grid, method, dt0 = _prepare(rhs, T, config)
    x0 = np.ascontiguousarray(np.asarray(x0, dtype=np.float64))
    if x0.shape != (fld.dim,):
        raise ParameterError(f"x0 has shape {x0.shape}, field dimension is {fld.dim}")
    if not np.all(np.isfinite(x0)):
        raise ParameterError("x0 must be finite")
    out = np.zeros((grid.size, fld.dim))
    info = np.zeros(6)
    _run(*fld.arrays, x0, float(T), grid, method, config.abs_tol, config.rel_tol,
         int(config.max_steps), dt0, fld.stiffness, *_tableau(), out, info)
    status = int(info[0])
    if status != OK:
        raise IntegrationError(f"{_STATUS_TEXT[status]} at t={info[1]:.6g} (T={T})", t_reached=float(info[1]))
    meta = {
        "method": config.method,
        "abs_tol": config.abs_tol,
        "rel_tol": config.rel_tol,
        "accepted": int(info[2]),
        "rejected": int(info[3]),
        "rhs_evals": int(info[4]),
    }
    traj = Trajectory(grid, out, meta)
    traj.meta["energy_drift"] = energy_drift(traj)
    return traj


def integrate_ensemble(rhs, X0, T: float, config: IntegratorConfig | None = None,
                       raise_on_failure: bool = True) -> EnsembleRun:
    """Integrate every row of ``X0`` independently (parallel over rows)."""
    fld, config, grid, method, dt0 = _prepare(rhs, T, config)
    X0 = np.ascontiguousarray(np.asarray(X0, dtype=np.float64))
    if X0.ndim != 2 or X0.shape[1] != fld.dim:
        raise ParameterError(f"X0 must have shape (M, {fld.dim}), got {X0.shape}")
    if not np.all(np.isfinite(X0)):
        raise ParameterError("initial conditions must be finite")
    M = X0.shape[0]
    out = np.zeros((M, grid.size, fld.dim))
    info = np.zeros((M, 6))
    if M:
        _run_many(*fld.arrays, X0, float(T), grid, method, config.abs_tol, config.rel_tol,
                  int(config.max_steps), dt0, fld.stiffness, *_tableau(), out, info)
    run = EnsembleRun(grid, out, info, {
        "method": config.method, "abs_tol": config.abs_tol, "rel_tol": config.rel_tol,
        "accepted_total": int(info[:, 2].sum()), "rejected_total": int(info[:, 3].sum()),
    })
    bad = run.failures()
    if bad and raise_on_failure:
        m, t_reached, reason = bad[0]
        raise IntegrationError(f"sample {m}: {reason} at t={t_reached:.6g} ({len(bad)} failed)",
                               t_reached=t_reached, sample=m)
    return run


def energy_drift(traj: Trajectory, floor: float = 1e-300) -> float:
    """``max_t |E(t) - E(0)| / max(E(0), floor)`` over the stored grid."""
    states = traj.states
    if states.shape[0] == 0:
        raise ParameterError("empty trajectory")
    E = np.sum(states * states, axis=1)
    return float(np.max(np.abs(E - E[0])) / max(E[0], floor))
