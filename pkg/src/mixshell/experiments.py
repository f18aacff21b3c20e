"""Study drivers: Galerkin convergence, uniform tail bounds, and invariance necessity.

All three drivers take ``model="shell"`` or ``model="tree"``. For the shell,
a truncation level is the number of shells ``N``. For the tree, it is the
depth of a complete tree with fixed branching, and level-order storage makes
a shallower tree a prefix of a deeper one. Components are always counted
1-based in that storage order, so component ``j`` is ``X_j`` for the shell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import IntegrationError, ParameterError
from .integrate import IntegratorConfig, integrate, integrate_ensemble
from .measures import (
    GaussianSpec, bootstrap_ci, invariance_test, sample_ensemble, z_moments,
)
from .norms import SobolevWeights, hs_norm, lp_time_norms
from .shell_model import divergence_residual, make_standard_params
from .tree_model import make_regular_tree, make_tree_params, tree_divergence_residual

MODELS = ("shell", "tree")
IC_FAMILIES = ("lambda_power", "geometric", "zero")


@dataclass(frozen=True)
class ModelSpec:
    """Which model a study runs, and the knobs that are not the truncation level."""

    kind: str = "shell"
    lam: float = 2.0
    branching: int = 2
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in MODELS:
            raise ParameterError(f"model must be one of {MODELS}, got {self.kind!r}")
        if not (np.isfinite(self.lam) and self.lam > 1):
            raise ParameterError(f"lambda must be > 1, got {self.lam}")
        if self.kind == "tree" and self.branching < 1:
            raise ParameterError("branching must be >= 1")

    def build(self, level: int):
        if self.kind == "shell":
            return make_standard_params(level, self.lam)
        top = make_regular_tree(self.branching, level)
        return make_tree_params(top, self.alpha, self.beta, self.lam)

    def weights(self, s: float, params) -> SobolevWeights:
        if self.kind == "shell":
            return SobolevWeights.shell(s, self.lam, params.dim)
        return SobolevWeights.tree(s, self.lam, params.topology)

    def exponents(self, level: int) -> np.ndarray:
        """Generation index of every component (shell ``n - 1`` or node level)."""
        if self.kind == "shell":
            return np.arange(level)
        return make_regular_tree(self.branching, level).level.copy()

    @property
    def multiplicity(self) -> int:
        """Number of components per generation growth factor (1 for the shell)."""
        return 1 if self.kind == "shell" else self.branching


def _check_levels(levels, minimum):
    levels = tuple(int(v) for v in levels)
    if not levels:
        raise ParameterError("at least one truncation level is required")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ParameterError(f"truncation levels must be strictly increasing, got {levels}")
    if levels[0] < minimum:
        raise ParameterError(f"truncation levels must be >= {minimum}")
    return levels


# Galerkin convergence ---------------------------------------------------------

@dataclass(frozen=True)
class GalerkinStudyConfig:
    model: ModelSpec = ModelSpec()
    family: str = "geometric"
    rho: float = 0.5
    levels: tuple = (5, 8, 11, 14)
    T: float = 0.5
    integrator: IntegratorConfig = IntegratorConfig()
    track: tuple = (1,)

    def __post_init__(self):
        if self.family not in IC_FAMILIES:
            raise ParameterError(f"initial condition family must be one of {IC_FAMILIES}")
        if self.family == "geometric" and not 0 < self.rho < 1:
            raise ParameterError(f"rho must lie in (0, 1), got {self.rho}")
        object.__setattr__(self, "levels", _check_levels(self.levels, 2 if self.model.kind == "shell" else 1))
        track = tuple(int(j) for j in self.track)
        if not track or min(track) < 1:
            raise ParameterError("tracked components are 1-based and at least one is required")
        object.__setattr__(self, "track", track)
        if not (np.isfinite(self.T) and self.T >= 0):
            raise ParameterError("T must be finite and >= 0")
        # the l2 check raises for families that are not square summable
        self.initial_norm()

    @property
    def ratio(self) -> float:
        """Per-generation decay factor of the initial condition."""
        if self.family == "lambda_power":
            return 1.0 / self.model.lam
        if self.family == "geometric":
            return self.rho
        return 0.0

    def initial_norm(self) -> float:
        """``|x_bar|_2`` of the infinite-dimensional initial condition, in closed form."""
        q2 = self.ratio**2
        growth = self.model.multiplicity * q2
        if growth >= 1:
            raise ParameterError(
                f"initial condition is not square summable (per-level factor {growth:.3g} >= 1)")
        return math.sqrt(q2 / (1.0 - growth))

    def initial_condition(self, level: int) -> np.ndarray:
        """First components of ``x_bar``: generation ``e`` gets ``ratio**(e + 1)``."""
        return self.ratio ** (self.model.exponents(level) + 1.0) if self.ratio else np.zeros(
            self.model.exponents(level).size)


@dataclass
class GalerkinResult:
    config: GalerkinStudyConfig
    times: np.ndarray
    bound: float
    rows: list  # one dict per (level, component)
    levels: list  # one dict per level: status, drift, steps, error

    def diffs(self, j: int, key: str = "sup_diff_ref") -> np.ndarray:
        return np.array([r[key] for r in self.rows if r["j"] == j])

    def monotone(self, j: int) -> bool:
        """Differences against the reference strictly decrease over the non-reference levels."""
        d = self.diffs(j)[:-1]
        return bool(np.all(np.isfinite(d)) and np.all(np.diff(d) < 0))


def _embed(states: np.ndarray, size: int) -> np.ndarray:
    out = np.zeros((states.shape[0], size))
    out[:, : states.shape[1]] = states
    return out


def galerkin_convergence(config: GalerkinStudyConfig) -> GalerkinResult:
    """Integrate the truncations from the same ``x_bar`` and compare on a common grid.

    The largest level is the reference. Each row reports, for one level and
    one tracked component, the sup-in-time difference to the reference and to
    the next larger level, plus ``max_t |X_j|``. Every level must satisfy
    ``max_t |X_j(t)| <= |x_bar|_2``; a violation raises ``AssertionError``
    because it means the energy is not conserved.
    """
    bound = config.initial_norm()
    grid = config.integrator.grid(config.T)
    integ = config.integrator.with_grid(grid)
    width = config.model.exponents(config.levels[-1]).size
    runs, level_info = {}, []
    for level in config.levels:
        params = config.model.build(level)
        x0 = config.initial_condition(level)
        try:
            traj = integrate(params, x0, config.T, integ)
        except IntegrationError as exc:
            level_info.append({"level": level, "status": "failed", "error": str(exc),
                               "t_reached": exc.t_reached})
            continue
        peak = float(np.max(np.abs(traj.states)))
        if peak > bound * (1 + 1e-9):
            raise AssertionError(f"level {level}: max |X_j| = {peak!r} exceeds |x_bar|_2 = {bound!r}")
        runs[level] = _embed(traj.states, width)
        level_info.append({"level": level, "status": "ok", "energy_drift": traj.meta["energy_drift"],
                           "steps": traj.meta["accepted"], "max_abs": peak})
    ref = runs.get(config.levels[-1])
    rows = []
    for a, level in enumerate(config.levels):
        nxt = config.levels[a + 1] if a + 1 < len(config.levels) else None
        for j in config.track:
            if j > width:
                raise ParameterError(f"tracked component {j} exceeds the largest truncation ({width})")
            cur = runs.get(level)
            row = {"level": level, "j": j, "sup_diff_ref": math.nan, "sup_diff_next": math.nan,
                   "max_abs": math.nan, "bound": bound}
            if cur is not None:
                row["max_abs"] = float(np.max(np.abs(cur[:, j - 1])))
                if ref is not None:
                    row["sup_diff_ref"] = float(np.max(np.abs(cur[:, j - 1] - ref[:, j - 1])))
                if nxt is not None and nxt in runs:
                    row["sup_diff_next"] = float(np.max(np.abs(cur[:, j - 1] - runs[nxt][:, j - 1])))
            rows.append(row)
    return GalerkinResult(config, grid, bound, rows, level_info)


# Tail probabilities -----------------------------------------------------------

@dataclass(frozen=True)
class TailStudyConfig:
    model: ModelSpec = ModelSpec()
    s: float = -1.0
    s1: float = -2.0
    r: float = 1.0
    p: float = 2.0
    T: float = 0.1
    M: int = 2000
    levels: tuple = (4, 8, 12, 16)
    eps: tuple = (0.1, 0.01)
    seed: int = 0
    integrator: IntegratorConfig = IntegratorConfig(abs_tol=1e-6, rel_tol=1e-6, n_out=20)
    stationarity_times: tuple = (0.05, 0.1)
    ci_level: float = 0.99
    n_resamples: int = 1000

    def __post_init__(self):
        if not self.s < 0:
            raise ParameterError(f"s must be negative, got {self.s}")
        if not self.s1 < -1:
            raise ParameterError(f"s1 must be < -1, got {self.s1}")
        if not self.p > 1:
            raise ParameterError(f"p must be > 1, got {self.p}")
        if not (np.isfinite(self.T) and self.T > 0):
            raise ParameterError("T must be positive")
        if self.M < 2:
            raise ParameterError("M must be at least 2")
        if not all(0 < e < 1 for e in self.eps):
            raise ParameterError("every eps must lie in (0, 1)")
        t1, t2 = (float(t) for t in self.stationarity_times)
        if not (0 <= t1 <= self.T and 0 <= t2 <= self.T and t1 != t2):
            raise ParameterError("stationarity times must be two distinct times in [0, T]")
        object.__setattr__(self, "levels", _check_levels(self.levels, 2 if self.model.kind == "shell" else 1))


def stationarity_check(early: np.ndarray, late: np.ndarray, level: float = 0.99,
                       n_resamples: int = 1000, seed: int = 0) -> dict:
    """Bootstrap CIs of per-component second moments at two times and whether they overlap.

    ``early`` and ``late`` are ``(M, D)`` ensembles.
    """
    a = np.ascontiguousarray(np.asarray(early, dtype=np.float64).T) ** 2
    b = np.ascontiguousarray(np.asarray(late, dtype=np.float64).T) ** 2
    lo_a, hi_a = bootstrap_ci(a, np.mean, level, n_resamples, seed)
    lo_b, hi_b = bootstrap_ci(b, np.mean, level, n_resamples, seed)
    overlap = (lo_a <= hi_b) & (lo_b <= hi_a)
    return {
        "early_ci": np.stack([lo_a, hi_a], axis=1),
        "late_ci": np.stack([lo_b, hi_b], axis=1),
        "overlap": overlap,
        "passed": bool(np.all(overlap)),
    }


def _tree_closed_form(spec: ModelSpec, s: float, r: float):
    growth = spec.branching * spec.lam ** (2 * s)
    return r**2 / (1.0 - growth) if growth < 1 else None


@dataclass
class TailResult:
    config: TailStudyConfig
    rows: list  # (level, statistic, eps) quantiles with bootstrap CIs
    levels: list  # per-level diagnostics: mean check, stationarity, failures
    uniform: dict  # (statistic, eps) -> CIs share a common point across levels

    @property
    def passed(self) -> bool:
        return all(self.uniform.values()) and all(
            lv["mean_check_passed"] and lv["stationary"] and not lv["failures"] for lv in self.levels)


def tail_probability_study(config: TailStudyConfig) -> TailResult:
    """Quantiles of ``|x|_{L^p(H^s)}`` and ``|dx/dt|_{L^p(H^s1)}`` across truncation levels.

    Each level integrates ``M`` Gaussian initial conditions. The derivative
    is taken from the field. For every ``eps`` the ``(1 - eps)``-quantile gets
    a percentile bootstrap interval, and uniformity means the intervals of all
    levels intersect. Each level also checks the sample mean of
    ``|x0|_{H^s}^2`` against its exact truncated value ``r^2 sum_n w_n``
    (4 standard errors), and the second-moment stationarity between the two
    ``stationarity_times``.
    """
    cfg = config
    t1, t2 = (float(t) for t in cfg.stationarity_times)
    base = cfg.integrator.grid(cfg.T)
    extra = [t for t in (t1, t2) if np.min(np.abs(base - t)) > 1e-12 * cfg.T]
    grid = np.unique(np.concatenate([base, extra]))
    integ = cfg.integrator.with_grid(grid)
    g1, g2 = (int(np.argmin(np.abs(grid - t))) for t in (t1, t2))
    quantiles = [1.0 - e for e in cfg.eps]
    rows, level_info = [], []
    for level in cfg.levels:
        params = cfg.model.build(level)
        fld = params.field()
        spec = GaussianSpec(fld.dim, cfg.r, cfg.seed)
        X0 = sample_ensemble(spec, cfg.M)
        run = integrate_ensemble(fld, X0, cfg.T, integ, raise_on_failure=False)
        failures = [{"sample": m, "t_reached": t, "reason": why} for m, t, why in run.failures()]
        states = run.states[run.status == 0]
        w = cfg.model.weights(cfg.s, params)
        w1 = w.at(cfg.s1)
        stats_by_name = {
            "lp_hs": lp_time_norms(grid, hs_norm(w, states), cfg.p),
            "w1p_hs1": lp_time_norms(grid, hs_norm(w1, fld(states)), cfg.p),
        }
        for name, values in stats_by_name.items():
            for e, q in zip(cfg.eps, quantiles):
                lo, hi = bootstrap_ci(values, lambda x, axis, q=q: np.quantile(x, q, axis=axis),
                                      cfg.ci_level, cfg.n_resamples, cfg.seed)
                rows.append({"level": level, "statistic": name, "eps": e,
                             "quantile": float(np.quantile(values, q)),
                             "ci_low": float(lo), "ci_high": float(hi)})
        sq0 = hs_norm(w, X0) ** 2
        expected = cfg.r**2 * float(np.sum(w.weights))
        se = float(np.std(sq0, ddof=1) / math.sqrt(cfg.M))
        mean_z = (float(np.mean(sq0)) - expected) / se if se > 0 else 0.0
        closed = (z_moments(cfg.model.lam, cfg.s, cfg.r, 1) if cfg.model.kind == "shell"
                  else _tree_closed_form(cfg.model, cfg.s, cfg.r))
        stat = stationarity_check(states[:, g1, :], states[:, g2, :], cfg.ci_level, cfg.n_resamples, cfg.seed)
        level_info.append({
            "level": level, "dim": fld.dim,
            "mean_hs2": float(np.mean(sq0)), "expected_truncated": expected, "expected_limit": closed,
            "mean_z": mean_z, "mean_check_passed": abs(mean_z) < 4.0,
            "stationary": stat["passed"], "failures": failures,
        })
    uniform = {}
    for name in ("lp_hs", "w1p_hs1"):
        for e in cfg.eps:
            sel = [r for r in rows if r["statistic"] == name and r["eps"] == e]
            uniform[(name, e)] = max(r["ci_low"] for r in sel) <= min(r["ci_high"] for r in sel)
    return TailResult(cfg, rows, level_info, uniform)


# Necessity of the coefficient matching ----------------------------------------

@dataclass
class NecessityReport:
    model: str
    index: int
    multiplier: float
    analytic_residual: float  # Jacobian trace on the basis vector at ``index``
    pilot_effect: float  # max |z| / sqrt(M) of the pilot
    M_requested: int
    M_used: int
    power_ok: bool
    report: object = dc_field(repr=False)

    @property
    def verdict(self) -> str:
        return self.report.verdict


def necessity_study(N: int, lam: float, index: int, multiplier: float, M: int, T: float,
                    r: float = 1.0, seed: int = 0, config: IntegratorConfig | None = None,
                    model: ModelSpec | None = None, pilot_M: int = 1000, z_crit: float = 4.0,
                    p_floor: float = 1e-4, max_M: int = 200_000, power_margin: float = 3.0) -> NecessityReport:
    """Invariance test of a model with one coefficient moved off the divergence-free value.

    Shell: ``h[index] = multiplier * k[index]`` (shell number, ``2..N-1``).
    Tree (``model.kind == "tree"``, ``N`` = depth): ``d`` at the 0-based
    node position ``index`` is multiplied by ``multiplier``.

    A pilot ensemble (seed ``seed + 1``) estimates the per-sample effect size
    ``max |z| / sqrt(M)``; the main test then runs at
    ``max(M, ((z_crit + power_margin) / effect)^2)`` samples, capped at
    ``max_M``. With ``multiplier == 1`` the pilot is skipped.
    """
    spec_model = model or ModelSpec(lam=lam)
    if spec_model.lam != lam:
        spec_model = ModelSpec(spec_model.kind, lam, spec_model.branching, spec_model.alpha, spec_model.beta)
    base = spec_model.build(N)
    if spec_model.kind == "shell":
        if not 2 <= index <= N - 1:
            raise ParameterError(f"perturbation index must lie in 2..{N - 1}, got {index}")
        params = base.perturbed(index, multiplier)
        basis = np.zeros(N)
        basis[index - 1] = 1.0
        residual = float(divergence_residual(params, basis))
    else:
        if not 0 <= index < base.dim or base.d[index] == 0:
            raise ParameterError(f"node {index} has no active d coefficient")
        params = base.with_d({index: multiplier * base.d[index]})
        basis = np.zeros(base.dim)
        basis[index] = 1.0
        residual = float(tree_divergence_residual(params, basis))
    config = config or IntegratorConfig(abs_tol=1e-8, rel_tol=1e-8)
    effect, M_used = 0.0, int(M)
    if multiplier != 1 and pilot_M >= 2:
        pilot = invariance_test(params, GaussianSpec(params.dim, r, (seed + 1) % 2**64), T, pilot_M, config,
                                z_crit, p_floor)
        effect = pilot.max_abs_z() / math.sqrt(pilot_M)
        if effect > 0:
            needed = math.ceil(((z_crit + power_margin) / effect) ** 2)
            M_used = max(M_used, min(needed, max_M))
    power_ok = multiplier == 1 or effect * math.sqrt(M_used) >= z_crit + power_margin
    report = invariance_test(params, GaussianSpec(params.dim, r, seed), T, M_used, config, z_crit, p_floor)
    return NecessityReport(spec_model.kind, int(index), float(multiplier), residual, float(effect),
                           int(M), M_used, bool(power_ok), report)
