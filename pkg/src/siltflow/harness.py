"""Experiment registry, INI configuration and result persistence."""
from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import experiments as ex
from .errors import InputError, NumericalError, SiltError
from .field import CovarianceSpec, GridSpec, sample_field
from .flow_det import DriftSpec
from .flow_iso import MODES, make_mollifier
from .localtime import SiltConfig
from .rng import MASK64, stream

EXIT_OK = 0
EXIT_COMPONENT = 1
EXIT_USAGE = 2
EXIT_UNKNOWN_EXPERIMENT = 3
EXIT_INVALID_PARAMS = 4
EXIT_UNWRITABLE = 5
EXIT_NUMERICAL = 6


@dataclass(frozen=True)
class Param:
    type: str  # "int", "float", "floats", "str"
    default: Any
    lo: float | None = None
    hi: float | None = None
    choices: tuple | None = None
    help: str = ""

    def parse(self, name: str, raw) -> Any:
        try:
            if self.type == "int":
                v = int(raw)
            elif self.type == "float":
                v = float(raw)
            elif self.type == "floats":
                items = raw.split(",") if isinstance(raw, str) else list(raw)
                v = [float(x) for x in items if str(x).strip()]
                if not v:
                    raise ValueError("empty list")
            else:
                v = str(raw).strip()
        except (TypeError, ValueError) as exc:
            raise InputError(f"parameter {name!r}: cannot parse {raw!r} as {self.type} ({exc})") from None
        for x in v if isinstance(v, list) else [v]:
            if self.choices is not None and x not in self.choices:
                raise InputError(f"parameter {name!r} must be one of {self.choices}, got {x!r}")
            if self.lo is not None and x < self.lo:
                raise InputError(f"parameter {name!r}={x} below minimum {self.lo}")
            if self.hi is not None and x > self.hi:
                raise InputError(f"parameter {name!r}={x} above maximum {self.hi}")
        return v

    def format(self, v) -> str:
        if self.type == "floats":
            return ", ".join(repr(float(x)) for x in v)
        if self.type == "float":
            return repr(float(v))
        return str(v)

    def describe(self) -> dict:
        d = {"type": self.type, "default": self.default, "help": self.help}
        if self.lo is not None or self.hi is not None:
            d["range"] = [self.lo, self.hi]
        if self.choices is not None:
            d["choices"] = list(self.choices)
        return d


_K = Param("int", 2, 2, 4, help="SILT multiplicity")
_EPS_KERNEL = Param("float", 0.01, 1e-6, 10.0, help="bandwidth of the Gaussian delta family")
_GRID = Param("int", 20, 2, 64, help="field grid nodes per axis")
_ALPHA = Param("float", 1.0, 1e-6, 2.0, help="covariance exponent alpha")
_NBINS = Param("int", 6, 1, 32, help="bins per axis for the self-intersection measure atoms")

SCHEMAS: dict[str, dict[str, Param]] = {
    "eps_scaling": {
        "t": Param("float", 0.1, 0.0, 10.0, help="flow time"),
        "k": _K,
        "eps_list": Param("floats", [0.7, 0.5, 0.4], 1e-3, 100.0, help="interaction radii"),
        "eps_kernel": _EPS_KERNEL,
        "dt": Param("float", 1e-3, 1e-6, 1.0),
        "grid": _GRID,
        "alpha": _ALPHA,
        "nbins": _NBINS,
    },
    "time_scaling": {
        "eps": Param("float", 1.0, 1e-3, 100.0, help="interaction radius"),
        "k": _K,
        "t_list": Param("floats", [0.25, 0.5, 0.75], 0.0, 100.0),
        "a": Param("float", 0.0, 0.0, 100.0, help="drift rate"),
        "eps_kernel": _EPS_KERNEL,
        "dt": Param("float", 5e-3, 1e-6, 1.0),
        "grid": _GRID,
        "alpha": _ALPHA,
        "nbins": _NBINS,
        "frozen": Param("int", 1, 0, 1, help="1 reuses one field sample across noise replicas"),
    },
    "dispersion_limit": {
        "t": Param("float", 0.5, 0.0, 10.0),
        "eps_list": Param("floats", [0.1], 1e-3, 100.0),
        "dt": Param("float", 1e-2, 1e-6, 1.0),
        "grid": _GRID,
        "alpha": _ALPHA,
    },
    "martingale_run": {
        "k": _K,
        "a": Param("float", 0.0, 0.0, 100.0),
        "eps": Param("float", 1.5, 1e-3, 100.0),
        "dt": Param("float", 5e-3, 1e-6, 1.0),
        "t_end": Param("float", 0.5, 1e-6, 100.0),
        "points": Param("int", 11, 2, 1001, help="t-grid points on [0, t_end]"),
        "eps_kernel": _EPS_KERNEL,
        "grid": _GRID,
        "alpha": _ALPHA,
        "nbins": _NBINS,
    },
    "hitting_probability": {
        "distance": Param("float", 0.5, 1e-9, 1.0, help="|u2 - u1|"),
        "a": Param("float", 2.0, 1e-9, 100.0),
        "eps": Param("float", 0.3, 1e-3, 100.0),
        "t_list": Param("floats", [1.0, 2.0, 4.0, 8.0], 1e-6, 1000.0),
        "dt": Param("float", 1e-3, 1e-6, 1.0),
    },
    "discretization_convergence": {
        "n_list": Param("floats", [2, 4, 8, 16], 1, 64),
        "t": Param("float", 1.0, 0.0, 100.0),
        "grid": Param("int", 32, 2, 128, help="left-layout field grid nodes per axis"),
        "alpha": _ALPHA,
        "eps_kernel": _EPS_KERNEL,
        "a11": Param("float", 0.5, -100.0, 100.0),
        "a22": Param("float", -0.2, -100.0, 100.0),
        "lam": Param("float", 1.0, -100.0, 100.0, help="spread modulation of the linear drift"),
        "dt": Param("float", 1e-2, 1e-6, 1.0),
    },
}

DEFAULT_REPLICAS = {
    "eps_scaling": 1000,
    "time_scaling": 2000,
    "dispersion_limit": 100,
    "martingale_run": 500,
    "hitting_probability": 2500,
    "discretization_convergence": 1,
}


def list_experiments() -> dict:
    """Machine-readable parameter schema per experiment."""
    return {
        name: {
            "params": {p: s.describe() for p, s in schema.items()},
            "default_replicas": DEFAULT_REPLICAS[name],
            "modes": list(MODES),
        }
        for name, schema in SCHEMAS.items()
    }


def validate_params(name: str, params: dict | None = None) -> dict:
    if name not in SCHEMAS:
        raise KeyError(name)
    schema = SCHEMAS[name]
    params = dict(params or {})
    unknown = set(params) - set(schema)
    if unknown:
        raise InputError(f"unknown parameters for {name}: {sorted(unknown)}; valid: {sorted(schema)}")
    out = {}
    for p, spec in schema.items():
        raw = params.get(p, spec.default)
        out[p] = spec.parse(p, raw)
    return out


@dataclass
class RunConfig:
    experiment: str
    params: dict = dc_field(default_factory=dict)
    seed: int = 0
    replicas: int | None = None
    workers: int = 1
    out: str = "results"
    mode: str = "liouville"

    def __post_init__(self):
        if not 0 <= int(self.seed) <= MASK64:
            raise InputError("seed must be a 64-bit unsigned value")
        if self.workers < 1:
            raise InputError("workers must be >= 1")
        if self.replicas is not None and self.replicas < 1:
            raise InputError("replicas must be >= 1")
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}")

    def resolved(self) -> "RunConfig":
        params = validate_params(self.experiment, self.params)
        reps = DEFAULT_REPLICAS[self.experiment] if self.replicas is None else int(self.replicas)
        return RunConfig(self.experiment, params, int(self.seed), reps, self.workers, self.out, self.mode)

    def config_hash(self) -> str:
        payload = json.dumps(
            {"experiment": self.experiment, "params": self.params, "seed": self.seed,
             "replicas": self.replicas, "mode": self.mode},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def write_config(cfg: RunConfig, path=None) -> str:
    """Serialize to the INI format read by :func:`read_config`."""
    cp = configparser.ConfigParser()
    run = {"experiment": cfg.experiment, "seed": str(cfg.seed), "workers": str(cfg.workers),
           "out": cfg.out, "mode": cfg.mode}
    if cfg.replicas is not None:
        run["replicas"] = str(cfg.replicas)
    cp["run"] = run
    schema = SCHEMAS.get(cfg.experiment, {})
    cp["params"] = {
        k: (schema[k].format(v) if k in schema else str(v)) for k, v in cfg.params.items()
    }
    buf = io.StringIO()
    cp.write(buf)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_config(source) -> RunConfig:
    """Parse an INI file (path or text) with a ``[run]`` and a ``[params]`` section."""
    cp = configparser.ConfigParser()
    try:
        if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).exists()):
            text = Path(source).read_text()
        else:
            text = str(source)
        cp.read_string(text)
    except (OSError, configparser.Error) as exc:
        raise InputError(f"cannot read config: {exc}") from None
    if "run" not in cp:
        raise InputError("config needs a [run] section")
    run = cp["run"]
    if "experiment" not in run:
        raise InputError("config [run] section needs 'experiment'")
    try:
        cfg = RunConfig(
            experiment=run["experiment"].strip(),
            params=dict(cp["params"]) if "params" in cp else {},
            seed=int(run.get("seed", "0")),
            replicas=int(run["replicas"]) if "replicas" in run else None,
            workers=int(run.get("workers", "1")),
            out=run.get("out", "results"),
            mode=run.get("mode", "liouville").strip(),
        )
    except ValueError as exc:
        raise InputError(f"bad value in [run]: {exc}") from None
    if cfg.experiment in SCHEMAS:
        cfg.params = validate_params(cfg.experiment, cfg.params)
    return cfg


# ------------------------------------------------------------------ adapters

def _field_setup(p):
    grid = GridSpec(p["grid"], p["grid"])
    return grid, CovarianceSpec(p["alpha"])


def _run_eps_scaling(p, seed, reps, mode, map_fn):
    grid, spec = _field_setup(p)
    return ex.eps_scaling(p["t"], p["k"], p["eps_list"], reps, seed=seed, dt=p["dt"], grid=grid,
                          spec=spec, cfg=SiltConfig(k=p["k"], epsilon=p["eps_kernel"]),
                          nbins=p["nbins"], mode=mode, map_fn=map_fn)


def _run_time_scaling(p, seed, reps, mode, map_fn):
    grid, spec = _field_setup(p)
    recs, fit = ex.time_scaling(p["eps"], p["k"], p["t_list"], p["a"], reps, seed=seed, dt=p["dt"],
                                grid=grid, spec=spec, cfg=SiltConfig(k=p["k"], epsilon=p["eps_kernel"]),
                                nbins=p["nbins"], frozen=bool(p["frozen"]), mode=mode, map_fn=map_fn)
    for r in recs:
        r.extra["fit"] = fit
    return recs


def _run_dispersion(p, seed, reps, mode, map_fn):
    grid, spec = _field_setup(p)
    return ex.dispersion_limit(p["t"], p["eps_list"], reps, seed=seed, dt=p["dt"], grid=grid,
                               spec=spec, map_fn=map_fn)


def _run_martingale(p, seed, reps, mode, map_fn):
    grid, spec = _field_setup(p)
    t_grid = np.linspace(0.0, p["t_end"], p["points"])
    ens, s = ex.martingale_run(p["k"], p["a"], p["eps"], p["dt"], t_grid, reps, seed=seed, grid=grid,
                               spec=spec, cfg=SiltConfig(k=p["k"], epsilon=p["eps_kernel"]),
                               nbins=p["nbins"], mode=mode, map_fn=map_fn)
    rq = ens.realized_qv.mean(axis=0)
    fq = ens.qv_formula.mean(axis=0)
    se = ens.values.std(axis=0, ddof=1) / np.sqrt(len(ens.values)) if reps > 1 else np.zeros(len(t_grid))
    summary = {k: v for k, v in s.items() if k not in ("means", "drift", "drift_se", "wall_time")}
    return [
        ex.ExperimentRecord(
            "martingale_run",
            dict(k=p["k"], eps_interaction=p["eps"], a=p["a"], t=float(t), dt=p["dt"], replicas=reps,
                 eps_kernel=p["eps_kernel"], n=p["grid"]),
            float(s["means"][j]), float(se[j]), seed, {"drift_trace": mode}, s["wall_time"],
            extra=dict(realized_qv=float(rq[j]), formula_qv=float(fq[j]), summary=summary),
        )
        for j, t in enumerate(t_grid)
    ]


def _run_hitting(p, seed, reps, mode, map_fn):
    recs, fit = ex.hitting_probability([0.0, 0.0], [p["distance"], 0.0], p["a"], p["eps"], p["t_list"],
                                       reps, seed=seed, dt=p["dt"], map_fn=map_fn)
    for r in recs:
        r.extra.update(c1=fit["c1"], c2=fit["c2"], fit_ok=fit["ok"], nonincreasing=fit["nonincreasing"])
    return recs


def _run_discretization(p, seed, reps, mode, map_fn):
    grid = GridSpec(p["grid"], p["grid"], layout="left")
    f = sample_field(grid, CovarianceSpec(p["alpha"]), stream(seed, "discretization_convergence"))
    drift = DriftSpec.modulated_linear(np.diag([p["a11"], p["a22"]]), p["lam"])
    recs, s = ex.discretization_convergence(f, [int(n) for n in p["n_list"]], p["t"], drift,
                                            SiltConfig(k=2, epsilon=p["eps_kernel"]), dt=p["dt"])
    for r in recs:
        r.seed = seed
        r.extra.update(C=s["C"], decreasing=s["decreasing"], bounded=s["bounded"])
    return recs


REGISTRY: dict[str, Callable] = {
    "eps_scaling": _run_eps_scaling,
    "time_scaling": _run_time_scaling,
    "dispersion_limit": _run_dispersion,
    "martingale_run": _run_martingale,
    "hitting_probability": _run_hitting,
    "discretization_convergence": _run_discretization,
}


def execute(cfg: RunConfig, map_fn=map) -> list[ex.ExperimentRecord]:
    """Run the experiment in-process and return its records (no files)."""
    if cfg.experiment not in REGISTRY:
        raise KeyError(cfg.experiment)
    c = cfg.resolved()
    recs = REGISTRY[c.experiment](c.params, c.seed, c.replicas, c.mode, map_fn)
    h = c.config_hash()
    for r in recs:
        r.params = {**r.params, "config": c.params}
        r.modes = {**r.modes, "mode": c.mode}
        r.extra["config_hash"] = h
    return recs


def record_line(rec: ex.ExperimentRecord) -> str:
    """Deterministic JSONL line; wall time goes to meta.txt instead."""
    d = rec.to_dict()
    d.pop("wall_time", None)
    return json.dumps(d, sort_keys=True)


def validate_record(line: str) -> dict:
    d = json.loads(line)
    name = d.get("experiment")
    if name not in SCHEMAS:
        raise InputError(f"record names unknown experiment {name!r}")
    validate_params(name, d["params"]["config"])
    if not (isinstance(d["stderr"], (int, float)) and (d["stderr"] >= 0 or d["stderr"] != d["stderr"])):
        raise InputError("record stderr must be nonnegative")
    return d


def _versions() -> dict:
    import scipy

    from . import __version__

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "siltflow": __version__}


def run(cfg: RunConfig, stderr=None) -> int:
    """Execute ``cfg`` and write ``results.jsonl``, ``summary.csv`` and ``meta.txt``."""
    err = stderr or sys.stderr
    if cfg.experiment not in REGISTRY:
        print(f"unknown experiment {cfg.experiment!r}; valid: {', '.join(REGISTRY)}", file=err)
        return EXIT_UNKNOWN_EXPERIMENT
    try:
        resolved = cfg.resolved()
    except InputError as exc:
        print(f"invalid parameters: {exc}", file=err)
        return EXIT_INVALID_PARAMS
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"output path {out} is not writable: {exc}", file=err)
        return EXIT_UNWRITABLE
    t0 = time.perf_counter()
    try:
        if cfg.workers > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                recs = execute(resolved, map_fn=pool.map)
        else:
            recs = execute(resolved)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=err)
        return EXIT_NUMERICAL
    except InputError as exc:
        print(f"invalid parameters: {exc}", file=err)
        return EXIT_INVALID_PARAMS
    except SiltError as exc:
        print(f"component error: {exc}", file=err)
        return EXIT_COMPONENT
    wall = time.perf_counter() - t0
    lines = [record_line(r) for r in recs]
    for line in lines:
        validate_record(line)
    (out / "results.jsonl").write_text("".join(line + "\n" for line in lines))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "t", "eps_interaction", "n", "estimate", "stderr", "replicas"])
        for r in recs:
            p = r.params
            w.writerow([r.experiment, p.get("t", ""), p.get("eps_interaction", ""), p.get("n", ""),
                        repr(float(r.estimate)), repr(float(r.stderr)), p.get("replicas", "")])
    mol = make_mollifier()
    meta = [f"{k}: {v}" for k, v in _versions().items()]
    meta += [
        f"experiment: {resolved.experiment}",
        f"config_hash: {resolved.config_hash()}",
        f"seed: {resolved.seed}",
        f"replicas: {resolved.replicas}",
        f"workers: {cfg.workers}",
        f"mode: {resolved.mode}",
        f"mollifier_C: {mol.C:.10f}",
        f"mollifier_c: {mol.c:.10f}",
        f"wall_time_s: {wall:.3f}",
    ]
    (out / "meta.txt").write_text("\n".join(meta) + "\n")
    return EXIT_OK
