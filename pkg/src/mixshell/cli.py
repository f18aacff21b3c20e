"""Command-line front end.

Configuration is an INI file whose sections and keys are fixed by
:data:`SCHEMA`; unknown sections or keys are errors. Command-line flags win
over the file. Every command writes ``resolved_config.ini`` (the complete
configuration actually used, with command defaults filled in) next to its
outputs, and every JSON output carries its SHA-256 digest and the seed.

Exit codes: 0 success (including a statistical FAIL verdict, which lives in
the JSON), 2 configuration error, 3 runtime failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .errors import DimensionError, IntegrationError, ParameterError
from .experiments import (
    GalerkinStudyConfig, ModelSpec, TailStudyConfig, galerkin_convergence, stationarity_check,
    tail_probability_study,
)
from .integrate import DENSE_OUTPUT, METHODS, IntegratorConfig, energy_drift, integrate
from .measures import GaussianSpec, invariance_test, sample_ensemble
from .shell_model import make_standard_params
from .suites import CHECKS, run_checks
from .tree_model import TreeTopology, make_regular_tree, make_tree_params

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 2, 3, 4

COMMANDS = ("simulate", "verify", "invariance", "galerkin", "tails", "tree-simulate", "tree-invariance")


class ConfigError(Exception):
    pass


# value parsers: text -> python value; None in SCHEMA means "command default"
def _float(text):
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"{text!r} is not finite")
    return v


def _int(text):
    return int(text, 10)


def _u64(text):
    v = int(text, 10)
    if not 0 <= v < 2**64:
        raise ValueError("must be an unsigned 64-bit integer")
    return v


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"{text!r} is not one of {', '.join(options)}")
        return text
    return parse


def _floats(text):
    return tuple(_float(t) for t in text.split(",") if t.strip())


def _ints(text):
    return tuple(_int(t.strip()) for t in text.split(",") if t.strip())


def _words(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _overrides(text):
    out = {}
    for item in _words(text):
        idx, sep, val = item.partition(":")
        if not sep:
            raise ValueError(f"override {item!r} must look like index:value")
        out[_int(idx.strip())] = _float(val.strip())
    return tuple(sorted(out.items()))


def _text(text):
    return text


SCHEMA = {
    "model": {
        "kind": (_choice("shell", "tree"), "shell"),
        "N": (_int, 8),
        "lambda": (_float, 2.0),
        "h": (_overrides, ()),
        "branching": (_int, 2),
        "depth": (_int, 3),
        "topology": (_text, ""),
        "alpha": (_float, 1.0),
        "beta": (_float, 1.0),
        "d_rule": (_choice("divergence_free", "proportional"), "divergence_free"),
    },
    "run": {
        "seed": (_u64, 0),
        "T": (_float, None),
        "r": (_float, 1.0),
        "x0": (_text, "gaussian"),
    },
    "integrator": {
        "method": (_choice(*METHODS), "rk45_adaptive"),
        "abs_tol": (_float, None),
        "rel_tol": (_float, None),
        "max_steps": (_int, 20_000_000),
        "initial_dt": (_float, None),
        "n_out": (_int, None),
        "dense_output": (_choice(*DENSE_OUTPUT), "steps"),
    },
    "invariance": {
        "M": (_int, 10_000),
        "z_crit": (_float, 4.0),
        "p_floor": (_float, 1e-4),
        "stationarity_times": (_floats, ()),
    },
    "galerkin": {
        "family": (_choice("lambda_power", "geometric", "zero"), "geometric"),
        "rho": (_float, 0.5),
        "levels": (_ints, (5, 8, 11, 14)),
        "track": (_ints, (1,)),
    },
    "tails": {
        "s": (_float, -1.0),
        "s1": (_float, -2.0),
        "p": (_float, 2.0),
        "M": (_int, 2000),
        "levels": (_ints, (4, 8, 12, 16)),
        "eps": (_floats, (0.1, 0.01)),
        "stationarity_times": (_floats, (0.05, 0.1)),
        "ci_level": (_float, 0.99),
        "n_resamples": (_int, 1000),
    },
    "verify": {
        "checks": (_words, CHECKS),
        "n_states": (_int, 1000),
        "n_cases": (_int, 10_000),
    },
}

# command defaults for the keys whose schema default is None: (T, tol, n_out)
COMMAND_DEFAULTS = {
    "simulate": (1.0, 1e-10, 100),
    "tree-simulate": (1.0, 1e-10, 100),
    "verify": (1.0, 1e-10, 100),
    "invariance": (0.5, 1e-8, 1),
    "tree-invariance": (0.5, 1e-8, 1),
    "galerkin": (0.5, 1e-10, 100),
    "tails": (0.1, 1e-6, 20),
}


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{i}:{_format(v)}" for i, v in value)
        return ", ".join(_format(v) for v in value)
    return str(value)


def read_config(text: str | None) -> dict:
    """Parse INI text against :data:`SCHEMA`; absent keys take schema defaults."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    if text:
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    cfg = {}
    for section, keys in SCHEMA.items():
        cfg[section] = {}
        for key, (parse, default) in keys.items():
            raw = parser[section][key].strip() if parser.has_option(section, key) else None
            if raw == "" and default is None:
                raw = None  # blank means "use the command default"
            if raw is not None:
                try:
                    cfg[section][key] = parse(raw)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None
            else:
                cfg[section][key] = default
    return cfg


def _explicit(text: str | None, section: str, key: str) -> bool:
    if not text:
        return False
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string(text)
    return parser.has_option(section, key) and parser[section][key].strip() != ""


def resolve(cfg: dict, command: str) -> dict:
    """Fill the command-dependent defaults, so the result is self-contained."""
    T, tol, n_out = COMMAND_DEFAULTS[command]
    out = {s: dict(v) for s, v in cfg.items()}
    if out["run"]["T"] is None:
        out["run"]["T"] = T
    for key in ("abs_tol", "rel_tol"):
        if out["integrator"][key] is None:
            out["integrator"][key] = tol
    if out["integrator"]["n_out"] is None:
        out["integrator"]["n_out"] = n_out
    if command.startswith("tree-"):
        out["model"]["kind"] = "tree"
    return out


def dump_config(cfg: dict) -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format(cfg[section][key])}".rstrip())
        lines.append("")
    return "\n".join(lines)


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# model construction ---------------------------------------------------------

def build_params(cfg: dict):
    m = cfg["model"]
    if m["kind"] == "shell":
        params = make_standard_params(m["N"], m["lambda"])
        if m["h"]:
            params = params.with_h(dict(m["h"]))
        return params
    if m["topology"]:
        try:
            text = Path(m["topology"]).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read topology file: {exc}") from None
        top = TreeTopology.from_text(text)
    else:
        top = make_regular_tree(m["branching"], m["depth"])
    return make_tree_params(top, m["alpha"], m["beta"], m["lambda"], m["d_rule"])


def build_integrator(cfg: dict, grid=None) -> IntegratorConfig:
    i = cfg["integrator"]
    return IntegratorConfig(method=i["method"], abs_tol=i["abs_tol"], rel_tol=i["rel_tol"],
                            max_steps=i["max_steps"], initial_dt=i["initial_dt"], n_out=i["n_out"],
                            dense_output=i["dense_output"],
                            output_grid=None if grid is None else tuple(grid))


def model_spec(cfg: dict) -> ModelSpec:
    m = cfg["model"]
    if m["kind"] == "tree" and m["topology"]:
        raise ConfigError("studies over truncation levels need a regular tree; remove [model] topology")
    return ModelSpec(m["kind"], m["lambda"], m["branching"], m["alpha"], m["beta"])


def initial_state(cfg: dict, dim: int) -> np.ndarray:
    x0 = cfg["run"]["x0"].strip()
    if x0 == "gaussian":
        return sample_ensemble(GaussianSpec(dim, cfg["run"]["r"], cfg["run"]["seed"]), 1)[0]
    if x0 == "zero":
        return np.zeros(dim)
    try:
        vals = np.array(_floats(x0))
    except ValueError as exc:
        raise ConfigError(f"[run] x0: {exc}") from None
    if vals.size != dim:
        raise ConfigError(f"[run] x0 has {vals.size} entries, the model has {dim} components")
    return vals


# serialization --------------------------------------------------------------

def _fmt_float(v) -> str:
    return repr(float(v))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to ``null``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, allow_nan=False) + "\n"


def write_outputs(out_dir: Path, files: dict) -> None:
    """Write every file under a temporary name, then rename each into place."""
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, content in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out_dir)
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(content)
            staged.append((tmp, out_dir / name))
        for tmp, final in staged:
            os.replace(tmp, final)
    finally:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)


# commands -------------------------------------------------------------------

def cmd_simulate(cfg: dict, meta: dict) -> tuple[int, dict]:
    params = build_params(cfg)
    x0 = initial_state(cfg, params.dim)
    traj = integrate(params, x0, cfg["run"]["T"], build_integrator(cfg))
    E = np.sum(traj.states**2, axis=1)
    header = ["t"] + [f"x_{i}" for i in range(1, params.dim + 1)]
    rows = [[t, *x] for t, x in zip(traj.times, traj.states)]
    summary = {
        "energy_initial": float(E[0]),
        "energy_final": float(E[-1]),
        "drift": energy_drift(traj),
        "steps": traj.meta["accepted"],
        "rejected": traj.meta["rejected"],
        **meta,
    }
    files = {"trajectory.csv": _csv(header, rows), "summary.json": _json(summary)}
    if cfg["model"]["kind"] == "tree":
        files["topology.txt"] = params.topology.to_text()
    return EXIT_OK, files


def cmd_verify(cfg: dict, meta: dict) -> tuple[int, dict]:
    params = build_params(cfg)
    checks = cfg["verify"]["checks"]
    unknown = [c for c in checks if c not in CHECKS]
    if unknown:
        raise ConfigError(f"[verify] unknown checks {unknown}; choose from {list(CHECKS)}")
    if not checks:
        print("warning: empty check list, nothing verified", file=sys.stderr)
    results = run_checks(params, checks, cfg["verify"]["n_states"], cfg["verify"]["n_cases"],
                         cfg["run"]["seed"])
    passed = all(r["passed"] for r in results)
    report = {"model": cfg["model"]["kind"], "checks": results, "passed": passed, **meta}
    return (EXIT_OK if passed else EXIT_VERIFY), {"verify.json": _json(report)}


def cmd_invariance(cfg: dict, meta: dict) -> tuple[int, dict]:
    params = build_params(cfg)
    inv = cfg["invariance"]
    spec = GaussianSpec(params.dim, cfg["run"]["r"], cfg["run"]["seed"])
    times = inv["stationarity_times"]
    if times and len(times) != 2:
        raise ConfigError("[invariance] stationarity_times needs exactly two times")
    report = invariance_test(params, spec, cfg["run"]["T"], inv["M"], build_integrator(cfg),
                             inv["z_crit"], inv["p_floor"], snapshot_times=times)
    out = report.to_json_dict()
    if times:
        stat = stationarity_check(report.snapshots[times[0]], report.snapshots[times[1]], 0.99, 1000,
                                  cfg["run"]["seed"])
        out["stationarity"] = {"times": list(times), "level": 0.99, "passed": stat["passed"],
                               "overlap": stat["overlap"], "early_ci": stat["early_ci"],
                               "late_ci": stat["late_ci"]}
    out.update(meta)
    rows = [[i + 1, c["mean_z"], c["var_z"], c["m4_z"], c["ks_p"]] for i, c in enumerate(report.per_component)]
    return EXIT_OK, {
        "invariance.json": _json(out),
        "invariance.csv": _csv(["component", "mean_z", "var_z", "m4_z", "ks_p"], rows),
    }


def cmd_galerkin(cfg: dict, meta: dict) -> tuple[int, dict]:
    g = cfg["galerkin"]
    study = GalerkinStudyConfig(model=model_spec(cfg), family=g["family"], rho=g["rho"], levels=g["levels"],
                                T=cfg["run"]["T"], integrator=build_integrator(cfg), track=g["track"])
    res = galerkin_convergence(study)
    keys = ["level", "j", "sup_diff_ref", "sup_diff_next", "max_abs", "bound"]
    summary = {
        "bound": res.bound,
        "monotone": {str(j): res.monotone(j) for j in study.track},
        "levels": res.levels,
        **meta,
    }
    return EXIT_OK, {
        "galerkin.csv": _csv(keys, [[r[k] for k in keys] for r in res.rows]),
        "galerkin.json": _json(summary),
    }


def cmd_tails(cfg: dict, meta: dict) -> tuple[int, dict]:
    t = cfg["tails"]
    study = TailStudyConfig(
        model=model_spec(cfg), s=t["s"], s1=t["s1"], r=cfg["run"]["r"], p=t["p"], T=cfg["run"]["T"], M=t["M"],
        levels=t["levels"], eps=t["eps"], seed=cfg["run"]["seed"], integrator=build_integrator(cfg),
        stationarity_times=t["stationarity_times"], ci_level=t["ci_level"], n_resamples=t["n_resamples"],
    )
    res = tail_probability_study(study)
    keys = ["level", "statistic", "eps", "quantile", "ci_low", "ci_high"]
    summary = {
        "uniform": [{"statistic": s, "eps": e, "passed": ok} for (s, e), ok in res.uniform.items()],
        "levels": res.levels,
        "passed": res.passed,
        **meta,
    }
    return EXIT_OK, {
        "tails.csv": _csv(keys, [[r[k] for k in keys] for r in res.rows]),
        "tails.json": _json(summary),
    }


HANDLERS = {
    "simulate": cmd_simulate,
    "tree-simulate": cmd_simulate,
    "verify": cmd_verify,
    "invariance": cmd_invariance,
    "tree-invariance": cmd_invariance,
    "galerkin": cmd_galerkin,
    "tails": cmd_tails,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixshell", description="Shell and tree cascade models: "
                                     "simulation, verification and statistical studies.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI configuration file")
        p.add_argument("--seed", type=_u64, help="overrides [run] seed")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory (default: .)")
        p.add_argument("--threads", type=int, help="worker threads for ensemble integration")
    return parser


def _set_threads(k):
    if k is None:
        return
    import numba
    if k < 1:
        raise ConfigError("--threads must be >= 1")
    numba.set_num_threads(min(k, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = None
        if args.config is not None:
            try:
                text = args.config.read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
        cfg = read_config(text)
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        if args.command.startswith("tree-") and _explicit(text, "model", "kind") and cfg["model"]["kind"] != "tree":
            raise ConfigError(f"{args.command} needs [model] kind = tree")
        cfg = resolve(cfg, args.command)
        resolved = dump_config(cfg)
        _set_threads(args.threads)
        meta = {"seed": cfg["run"]["seed"], "config_digest": config_digest(resolved)}
        code, files = HANDLERS[args.command](cfg, meta)
    except (ConfigError, ParameterError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrationError, AssertionError, MemoryError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    files["resolved_config.ini"] = resolved
    try:
        write_outputs(args.out, files)
    except OSError as exc:
        print(f"runtime error: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if code == EXIT_VERIFY:
        print("verification failed", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
