"""Gaussian product measures, reproducible ensembles and invariance testing.

Sampling is counter-based: component ``j`` of sample ``i`` is a pure function
of ``(seed, stream, i, j)``. Each sample owns a Philox stream whose key is the
seed and whose counter starts at ``(0, 0, stream, i)``. Raw 64-bit words are
mapped to uniforms in (0, 1) using their top 53 bits plus a half-ulp offset,
then pushed through the inverse normal CDF.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import special, stats

from .errors import ParameterError
from .field import as_field
from .integrate import IntegratorConfig, integrate_ensemble

STREAM_ENSEMBLE = 0
STREAM_REFERENCE = 1
STREAM_MONTE_CARLO = 2
STREAM_BOOTSTRAP = 3

_U64 = 2**64


@dataclass(frozen=True)
class GaussianSpec:
    dim: int
    r: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ParameterError(f"dim must be a positive integer, got {self.dim}")
        if not (np.isfinite(self.r) and self.r > 0):
            raise ParameterError(f"r must be > 0, got {self.r}")
        if not 0 <= int(self.seed) < _U64:
            raise ParameterError("seed must be an unsigned 64-bit integer")


def _raw_words(seed: int, stream: int, index: int, count: int) -> np.ndarray:
    gen = np.random.Philox(key=int(seed), counter=[0, 0, int(stream), int(index)])
    return gen.random_raw(count)


def standard_normals(seed: int, M: int, dim: int, stream: int = STREAM_ENSEMBLE, start: int = 0) -> np.ndarray:
    """``(M, dim)`` standard normal deviates for sample indices ``start..start+M-1``."""
    raw = np.empty((M, dim), dtype=np.uint64)
    for row in range(M):
        raw[row] = _raw_words(seed, stream, start + row, dim)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return special.ndtri(u)


def sample_ensemble(spec: GaussianSpec, M: int, stream: int = STREAM_ENSEMBLE, start: int = 0) -> np.ndarray:
    """``M`` iid draws of ``N(0, r^2)^{dim}``, deterministic in ``(seed, stream, index)``."""
    if M < 0:
        raise ParameterError("M must be nonnegative")
    return spec.r * standard_normals(spec.seed, M, spec.dim, stream, start)


@dataclass
class EnsembleStats:
    M: int
    mean: np.ndarray
    m2: np.ndarray  # central moments
    m4: np.ndarray
    se_mean: np.ndarray
    se_m2: np.ndarray
    se_m4: np.ndarray

    @classmethod
    def from_samples(cls, X) -> "EnsembleStats":
        # component-major layout so each reduction runs over a contiguous axis (pairwise sums)
        Xt = np.ascontiguousarray(np.asarray(X, dtype=np.float64).T)
        M = Xt.shape[1]
        if M < 2:
            raise ParameterError("need at least two samples for moment statistics")
        mean = Xt.sum(axis=1) / M
        dev = Xt - mean[:, None]
        d2 = dev * dev
        m2 = d2.sum(axis=1) / M
        m4 = (d2 * d2).sum(axis=1) / M
        m8 = ((d2 * d2) ** 2).sum(axis=1) / M
        return cls(
            M=M, mean=mean, m2=m2, m4=m4,
            se_mean=np.sqrt(m2 / M),
            se_m2=np.sqrt(np.maximum(m4 - m2**2, 0.0) / M),
            se_m4=np.sqrt(np.maximum(m8 - m4**2, 0.0) / M),
        )


def moment_z_scores(X, r: float) -> dict:
    """z-scores of raw moments against ``N(0, r^2)``, using the null standard errors.

    Targets: mean 0 (sd ``r``), second moment ``r^2`` (sd ``sqrt(2) r^2``),
    fourth moment ``3 r^4`` (sd ``sqrt(96) r^4``).
    """
    Xt = np.ascontiguousarray(np.asarray(X, dtype=np.float64).T)
    M = Xt.shape[1]
    sq = Xt * Xt
    mean = Xt.sum(axis=1) / M
    mom2 = sq.sum(axis=1) / M
    mom4 = (sq * sq).sum(axis=1) / M
    root = np.sqrt(M)
    return {
        "mean_z": mean / r * root,
        "var_z": (mom2 - r**2) / (np.sqrt(2.0) * r**2) * root,
        "m4_z": (mom4 - 3 * r**4) / (np.sqrt(96.0) * r**4) * root,
    }


def _check_series_args(lam, r):
    if not (np.isfinite(lam) and lam > 1):
        raise ParameterError(f"lambda must be > 1, got {lam}")
    if not (np.isfinite(r) and r > 0):
        raise ParameterError(f"r must be > 0, got {r}")


def z_moments(lam: float, s: float, r: float, order: int) -> float:
    """Mean (order 1) or variance (order 2) of ``Z = sum_n lam^{2s(n-1)} r^2 W_n``, ``W_n ~ chi2(1)``."""
    _check_series_args(lam, r)
    if not s < 0:
        raise ParameterError(f"s must be negative, got {s}")
    if order == 1:
        return r**2 / (1.0 - lam ** (2 * s))
    if order == 2:
        return 2.0 * r**4 / (1.0 - lam ** (4 * s))
    raise ParameterError(f"order must be 1 or 2, got {order}")


def z4_mean(lam: float, s: float, r: float) -> float:
    """Mean of ``Z = sum_n lam^{(2+2s)(n-1)} W_n^4`` with ``W_n ~ N(0, r^2)``."""
    _check_series_args(lam, r)
    if not s < -1:
        raise ParameterError(f"s must be < -1 for the series to converge, got {s}")
    return 3.0 * r**4 / (1.0 - lam ** (2 + 2 * s))


def sample_z_series(weights, r: float, M: int, seed: int, power: int = 2) -> np.ndarray:
    """Monte Carlo draws of ``sum_n weights[n] * W_n^power`` with ``W_n ~ N(0, r^2)``."""
    w = np.asarray(weights, dtype=np.float64)
    W = r * standard_normals(seed, M, w.size, STREAM_MONTE_CARLO)
    return (W**power) @ w


def bootstrap_ci(data, statistic, level: float = 0.99, n_resamples: int = 1000, seed: int = 0,
                 batch: int | None = 100):
    """Percentile bootstrap interval of ``statistic(data, axis=-1)``, vectorised over leading axes.

    ``batch`` caps how many resamples are held in memory at once.
    """
    rng = np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, STREAM_BOOTSTRAP, 0]))
    res = stats.bootstrap(
        (np.asarray(data, dtype=np.float64),), statistic, n_resamples=n_resamples, batch=batch,
        confidence_level=level, method="percentile", axis=-1, vectorized=True, random_state=rng,
    )
    return res.confidence_interval.low, res.confidence_interval.high


def params_digest(params) -> str:
    blob = json.dumps(params.as_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class InvarianceReport:
    model: str
    params_digest: str
    T: float
    M: int
    seed: int
    per_component: list
    verdict: str
    z_crit: float
    p_floor: float
    n_tests: int
    failures: list = dc_field(default_factory=list)
    snapshots: dict = dc_field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"

    def max_abs_z(self, key: str | None = None) -> float:
        keys = [key] if key else ["mean_z", "var_z", "m4_z"]
        return max(abs(c[k]) for c in self.per_component for k in keys)

    def to_json_dict(self) -> dict:
        return {
            "model": self.model,
            "params_digest": self.params_digest,
            "T": self.T,
            "M": self.M,
            "seed": self.seed,
            "per_component": self.per_component,
            "verdict": self.verdict,
            "thresholds": {"z_crit": self.z_crit, "p_floor": self.p_floor,
                           "correction": "bonferroni", "n_tests": self.n_tests},
            "failures": self.failures,
        }


def _verdict(per_component, z_crit, p_floor, n_tests, failures) -> str:
    if failures:
        return "FAIL"
    for comp in per_component:
        if max(abs(comp["mean_z"]), abs(comp["var_z"]), abs(comp["m4_z"])) >= z_crit:
            return "FAIL"
        if min(1.0, comp["ks_p"] * n_tests) <= p_floor:
            return "FAIL"
    return "PASS"


def invariance_test(params, spec: GaussianSpec, T: float, M: int, config: IntegratorConfig | None = None,
                    z_crit: float = 4.0, p_floor: float = 1e-4, snapshot_times=()) -> InvarianceReport:
    """Push ``M`` samples of the Gaussian through the flow and test the law at ``T``.

    Every component gets three moment z-scores (raw moments against the
    Gaussian targets) and a two-sample KS p-value against a fresh draw.
    PASS needs every ``|z| < z_crit`` and every Bonferroni-adjusted KS p-value
    (over components x 4 statistics) above ``p_floor``. States at
    ``snapshot_times`` are kept in ``report.snapshots`` for further analysis.
    """
    fld = as_field(params)
    if spec.dim != fld.dim:
        raise ParameterError(f"measure dimension {spec.dim} does not match model dimension {fld.dim}")
    if M < 2:
        raise ParameterError("M must be at least 2")
    config = config or IntegratorConfig(abs_tol=1e-8, rel_tol=1e-8)
    times = sorted({0.0, float(T), *(float(t) for t in snapshot_times)})
    X0 = sample_ensemble(spec, M)
    run = integrate_ensemble(fld, X0, T, config.with_grid(times), raise_on_failure=False)
    failures = [{"sample": m, "t_reached": t, "reason": why} for m, t, why in run.failures()]
    ok = run.status == 0
    final = run.states[ok, -1, :]
    reference = sample_ensemble(spec, M, stream=STREAM_REFERENCE)
    per_component = []
    if final.shape[0] >= 2:
        z = moment_z_scores(final, spec.r)
        for i in range(spec.dim):
            ks = stats.ks_2samp(final[:, i], reference[:, i])
            per_component.append({
                "mean_z": float(z["mean_z"][i]),
                "var_z": float(z["var_z"][i]),
                "m4_z": float(z["m4_z"][i]),
                "ks_p": float(ks.pvalue),
            })
    else:
        nan = float("nan")
        per_component = [{"mean_z": nan, "var_z": nan, "m4_z": nan, "ks_p": nan} for _ in range(spec.dim)]
    n_tests = 4 * spec.dim
    model = params.as_dict()["model"] if hasattr(params, "as_dict") else "field"
    digest = params_digest(params) if hasattr(params, "as_dict") else ""
    snapshots = {t: run.states[ok, g, :] for g, t in enumerate(run.times)}
    return InvarianceReport(
        model=model, params_digest=digest, T=float(T), M=int(M), seed=int(spec.seed),
        per_component=per_component,
        verdict=_verdict(per_component, z_crit, p_floor, n_tests, failures),
        z_crit=z_crit, p_floor=p_floor, n_tests=n_tests, failures=failures, snapshots=snapshots,
    )


def sampler_self_test(spec: GaussianSpec, M: int) -> dict:
    """Moment z-scores of a raw sample; the T = 0 calibration baseline."""
    return moment_z_scores(sample_ensemble(spec, M), spec.r)
