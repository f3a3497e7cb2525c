"""Command-line front end: ``run``, ``reproduce``, ``list-models`` and ``validate``.

Configurations are YAML documents with three sections::

    model:
      name: chain            # catalog name
      params: {n: 2}         # constructor overrides
    measure:
      kind: obs_ambiguity
      epsilon: 1.0e-6
      output_metric: Linf
      horizon: [0, 15]
      node_count: 30
    solver:
      starts: 4
      seed: 0

Results go to ``$AMBIGUITY_OUTPUT_DIR`` (default ``./results``): one JSON record per run and a
dense trajectory table next to it.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import measures as M
from .collocation import TimeMap, lgl_grid
from .models import (
    CATALOG,
    FourierControlSpace,
    catalog_entry,
    heat_target,
)
from .nlp_solver import SolverOptions
from .transcription import ConstraintSet, TrajectoryMetric, simulate, total_variation

SCHEMA_VERSION = 1
OUTPUT_ENV = "AMBIGUITY_OUTPUT_DIR"
EXIT_OK, EXIT_ERROR, EXIT_VERDICT = 0, 1, 2

MEASURES = (
    "obs_ambiguity",
    "detectability",
    "least_obs_direction",
    "lp_gain",
    "gramian_gain",
    "control_ambiguity",
    "control_ambiguity_region",
    "control_cost",
)
DYNAMIC_MEASURES = set(MEASURES) - {"gramian_gain"}

MEASURE_KEYS = {
    "kind", "epsilon", "output_metric", "estimand_metric", "estimand", "estimand_channels", "output_channels",
    "horizon", "node_count", "initial_state", "param_box", "free_params", "param_box_fraction", "free_controls",
    "variation_bounds", "state_upper", "state_lower", "control_lower", "control_upper", "rho", "sigma", "p",
    "frequencies", "normalized", "disturbance_channel", "target", "targets", "initial_states", "psi_schedule",
    "nominal_input", "delta", "x_weights", "label", "x0", "integration_nodes",
}
SOLVER_KEYS = {"method", "starts", "seed", "workers", "feasibility_tol", "acceptance_tol", "start_radius",
               "max_outer", "deviation_bound", "condensed"}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def artifact_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0.1.0"


# --- configuration ---------------------------------------------------------------------


@dataclass
class RunConfig:
    model: str
    model_params: dict = field(default_factory=dict)
    measure: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    output: str | None = None

    @classmethod
    def from_dict(cls, doc: Any) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config: top level must be a mapping")
        unknown = set(doc) - {"model", "measure", "solver", "output"}
        if unknown:
            raise ConfigError(f"config: unknown section {sorted(unknown)[0]!r}")
        model = doc.get("model")
        if isinstance(model, str):
            model = {"name": model}
        if not isinstance(model, dict) or "name" not in model:
            raise ConfigError("model.name: required")
        measure = dict(doc.get("measure") or {})
        solver = dict(doc.get("solver") or {})
        for key in measure:
            if key not in MEASURE_KEYS:
                raise ConfigError(f"measure.{key}: unknown key")
        for key in solver:
            if key not in SOLVER_KEYS:
                raise ConfigError(f"solver.{key}: unknown key")
        out = doc.get("output")
        if isinstance(out, dict):
            out = out.get("path")
        return cls(str(model["name"]), dict(model.get("params") or {}), measure, solver, out)

    def to_dict(self) -> dict:
        doc = {"model": {"name": self.model, "params": self.model_params}, "measure": self.measure,
               "solver": self.solver}
        if self.output is not None:
            doc["output"] = self.output
        return doc

    @property
    def kind(self) -> str:
        return self.measure.get("kind", "")


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: not valid YAML: {exc}") from None
    return RunConfig.from_dict(doc)


def _metric(spec, key) -> TrajectoryMetric:
    if spec is None:
        return None
    if isinstance(spec, str):
        spec = {"kind": spec}
    if not isinstance(spec, dict):
        raise ConfigError(f"measure.{key}: expected a metric name or mapping")
    try:
        return TrajectoryMetric(spec.get("kind", "L2"), spec.get("weights"), bool(spec.get("time_normalized", False)))
    except ValueError as exc:
        raise ConfigError(f"measure.{key}: {exc}") from None


def _channels(model, values, dim_attr, key):
    if values is None:
        return None
    n = getattr(model, dim_attr)
    vals = [int(v) for v in values]
    for v in vals:
        if not 0 <= v < n:
            raise ConfigError(f"measure.{key}: channel {v} does not exist (model has {n})")
    return vals


def _entry(cfg: RunConfig):
    if cfg.model not in CATALOG:
        raise ConfigError(f"model.name: unknown model {cfg.model!r}; available: {', '.join(CATALOG)}")
    params = dict(cfg.model_params)
    if cfg.model == "vehicles" and "nominal_input" in cfg.measure:
        params["reading"] = cfg.measure["nominal_input"]
    if cfg.model == "afm" and "delta" in cfg.measure:
        params["delta"] = float(cfg.measure["delta"])
    try:
        return catalog_entry(cfg.model, **params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model.params: {exc}") from None


def validate(cfg: RunConfig):
    """Check a config against the catalog; returns the resolved catalog entry."""
    kind = cfg.kind
    if kind not in MEASURES:
        raise ConfigError(f"measure.kind: unknown measure {kind!r}; choose from {', '.join(MEASURES)}")
    entry = _entry(cfg)
    model = entry.model
    m = cfg.measure
    nc = int(m.get("node_count", 30 if cfg.model == "chain" else 15))
    if kind in DYNAMIC_MEASURES and nc < 5:
        raise ConfigError("measure.node_count: must be >= 5 for dynamic measures")
    hz = m.get("horizon", entry.horizon)
    try:
        TimeMap(float(hz[0]), float(hz[1]))
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"measure.horizon: {exc}") from None
    _channels(model, m.get("output_channels"), "output_dim", "output_channels")
    _channels(model, m.get("estimand_channels"),
              "state_dim" if m.get("estimand", "state") == "state" else "estimand_dim", "estimand_channels")
    _channels(model, m.get("free_controls"), "control_dim", "free_controls")
    _channels(model, list((m.get("variation_bounds") or {}).keys()), "control_dim", "variation_bounds")
    _channels(model, m.get("free_params"), "param_dim", "free_params")
    for key in ("output_metric", "estimand_metric", "x_weights"):
        if key != "x_weights":
            _metric(m.get(key), key)
    if kind in ("obs_ambiguity", "detectability"):
        eps = np.atleast_1d(np.asarray(m.get("epsilon", 0.0), dtype=float))
        if not np.all(eps > 0):
            raise ConfigError("measure.epsilon: must be positive")
    if kind in ("lp_gain", "gramian_gain"):
        if not float(m.get("sigma", 0.0)) > 0:
            raise ConfigError("measure.sigma: must be positive")
        freq = m.get("frequencies")
        if not isinstance(freq, (list, tuple)) or len(freq) != 2:
            raise ConfigError("measure.frequencies: expected [k1, k2]")
        if model.control_dim == 0:
            raise ConfigError("measure.kind: gain measures need a model with an input channel")
    if kind == "least_obs_direction" and not float(m.get("rho", 0.0)) > 0:
        raise ConfigError("measure.rho: must be positive")
    if kind in ("control_ambiguity", "control_cost") and "target" not in m:
        raise ConfigError("measure.target: required")
    if kind == "control_ambiguity_region" and not m.get("targets"):
        raise ConfigError("measure.targets: required and nonempty")
    if "psi_schedule" in m:
        ps = [float(v) for v in m["psi_schedule"]]
        if not ps or any(v <= 0 for v in ps) or any(b <= a for a, b in zip(ps, ps[1:])):
            raise ConfigError("measure.psi_schedule: must be increasing and positive")
    try:
        _settings(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver: {exc}") from None
    return entry


def _settings(cfg: RunConfig) -> M.MeasureSettings:
    s = cfg.solver
    opts = SolverOptions(method=s.get("method", "sqp"), feasibility_tol=float(s.get("feasibility_tol", 1e-8)),
                         max_outer=int(s.get("max_outer", 200)))
    return M.MeasureSettings(starts=int(s.get("starts", 4)), seed=int(s.get("seed", 0)), workers=int(s.get("workers", 1)),
                             start_radius=float(s.get("start_radius", 1.0)),
                             acceptance_tol=float(s.get("acceptance_tol", 1e-6)),
                             deviation_bound=float(s.get("deviation_bound", 64.0)),
                             condensed=None if s.get("condensed") is None else bool(s["condensed"]), solver=opts)


def _target(model_name, model, spec, key):
    if isinstance(spec, dict) and "arch" in spec:
        if model_name != "heat-rod":
            raise ConfigError(f"measure.{key}: arch targets are defined for heat-rod only")
        return heat_target(float(spec["arch"]), model.state_dim)
    x = np.asarray(spec, dtype=float).ravel()
    if x.shape != (model.state_dim,):
        raise ConfigError(f"measure.{key}: expected {model.state_dim} values")
    return x


def _bounds(cs_kwargs, m, model):
    for key, n in (("state_upper", model.state_dim), ("state_lower", model.state_dim),
                   ("control_lower", model.control_dim), ("control_upper", model.control_dim)):
        if key in m:
            cs_kwargs[key] = np.broadcast_to(np.asarray(m[key], dtype=float), (n,)).copy()


def _param_box(cfg, entry):
    m = cfg.measure
    model = entry.model
    if "param_box" in m:
        lo, hi = m["param_box"]
        return (np.broadcast_to(np.asarray(lo, float), model.params.shape).copy(),
                np.broadcast_to(np.asarray(hi, float), model.params.shape).copy())
    free = m.get("free_params")
    if free is None and cfg.model == "laub-loomis":
        free = list(model.info["unknown"])
    if free is None:
        return None
    frac = float(m.get("param_box_fraction", 0.5))
    lo, hi = model.params.copy(), model.params.copy()
    for i in free:
        lo[i] = model.params[i] * (1.0 - frac)
        hi[i] = model.params[i] * (1.0 + frac)
    return lo, hi


def execute(cfg: RunConfig) -> M.MeasureReport:
    """Run the measure described by ``cfg`` and return its report."""
    entry = validate(cfg)
    model = entry.model
    m = cfg.measure
    kind = cfg.kind
    settings = _settings(cfg)
    hz = m.get("horizon", entry.horizon)
    tm = TimeMap(float(hz[0]), float(hz[1]))
    nc = int(m.get("node_count", 30 if cfg.model == "chain" else 15))
    grid = lgl_grid(nc)
    x0 = np.asarray(m.get("x0", entry.x0), dtype=float)
    cs_kwargs = {}
    _bounds(cs_kwargs, m, model)

    if kind in ("obs_ambiguity", "detectability", "least_obs_direction"):
        nominal = simulate(model, x0, tm, grid, entry.control)
        init = m.get("initial_state", "fixed" if model.param_dim and _param_box(cfg, entry) else "free")
        cs = ConstraintSet(initial_state=init, param_box=_param_box(cfg, entry),
                           free_controls=m.get("free_controls", [] if model.control_dim else None),
                           variation_bounds={int(k): float(v) for k, v in (m.get("variation_bounds") or {}).items()},
                           **cs_kwargs)
        y_metric = _metric(m.get("output_metric"), "output_metric") or TrajectoryMetric("Linf")
        out_ch = _channels(model, m.get("output_channels"), "output_dim", "output_channels")
        if kind == "least_obs_direction":
            y_metric = _metric(m.get("output_metric"), "output_metric") or TrajectoryMetric("L2")
            return M.least_observable_direction(model, nominal, float(m["rho"]), y_metric, settings, out_ch, cs)
        z_default = "final_value_norm" if kind == "detectability" else "initial_value_norm"
        z_metric = _metric(m.get("estimand_metric"), "estimand_metric") or TrajectoryMetric(z_default)
        est = m.get("estimand", "state")
        est_ch = m.get("estimand_channels")
        rep = M.observability_ambiguity(model, nominal, m["epsilon"], y_metric, z_metric, cs, settings, out_ch, est, est_ch)
        if cfg.model == "vehicles":
            u = rep.worst_trajectory.controls[0]
            rep.details["worst_total_variation"] = total_variation(u)
            rep.details["nominal_input_check"] = dict(entry.notes)
            rep.details["nominal_input_flag"] = (
                "literal nominal input has total variation "
                f"{entry.notes['tv_literal']:.4g} > 2, inconsistent with V_max = 3.0 being 50% above the true variation; "
                f"using the '{entry.notes['nominal_input_reading']}' reading (variation "
                f"{entry.notes['tv_half_sine'] if entry.notes['nominal_input_reading'] == 'half-sine' else entry.notes['tv_literal']:.4g})"
            )
            sel = est_ch[0] if est_ch else 0
            nom_norm = float(np.sqrt(np.sum(
                TrajectoryMetric("L2").node_weights(grid, tm) * model.e(nominal.times, nominal.states, nominal.controls, nominal.params)[sel] ** 2)))
            rep.details["nominal_estimand_norm"] = nom_norm
            rep.details["relative_ambiguity"] = rep.value / nom_norm if nom_norm > 0 else None
        return rep

    if kind in ("lp_gain", "gramian_gain"):
        k1, k2 = (int(v) for v in m["frequencies"])
        space = FourierControlSpace(k1, k2, tm.t0, tm.t1)
        sigma = float(m["sigma"])
        dch = m.get("disturbance_channel")
        if kind == "gramian_gain":
            return M.gramian_gain(model, x0, space, sigma, lgl_grid(int(m.get("integration_nodes", 101))),
                                  control=entry.control, disturbance_channel=dch, time_map=tm)
        nominal = simulate(model, x0, tm, grid, entry.control)
        box = None
        if "param_box" in m:
            box = _param_box(cfg, entry)
        elif cfg.model == "afm" and m.get("delta") is None:
            lo, hi = entry.notes["delta_box"]
            box = ([lo], [hi])
        p = m.get("p", 2)
        p = float("inf") if str(p).lower() in ("inf", "infinity") else int(p)
        return M.lp_gain(model, nominal, space, sigma, p, box, settings, dch, bool(m.get("normalized", False)))

    # control measures
    x_weights = m.get("x_weights")
    if x_weights is None and cfg.model == "heat-rod":
        x_weights = float(np.sqrt(model.info["dr"]))
    x_metric = TrajectoryMetric("final_value_norm", x_weights)
    if cfg.model == "heat-rod" and "state_upper" not in cs_kwargs:
        cs_kwargs["state_upper"] = np.full(model.state_dim, entry.notes["state_cap"])
    cs = ConstraintSet(**cs_kwargs)
    if kind == "control_ambiguity":
        x1 = _target(cfg.model, model, m["target"], "target")
        return M.control_ambiguity(model, x0, x1, tm, grid, cs, settings, x_metric, entry.control)
    if kind == "control_ambiguity_region":
        targets = [_target(cfg.model, model, t, "targets") for t in m["targets"]]
        inits = [np.asarray(v, float) for v in m.get("initial_states", [x0])]
        rep = M.control_ambiguity_region(model, inits, targets, tm, grid, cs, settings, x_metric, entry.control)
        for row, t in zip(rep.details["pairs"], [t for _ in inits for t in m["targets"]]):
            row["target_spec"] = t
        return rep
    x1 = _target(cfg.model, model, m["target"], "target")
    psi = m.get("psi_schedule", M.DEFAULT_PSI)
    w = None if x_weights is None else np.broadcast_to(np.asarray(x_weights, float), (model.state_dim,))
    return M.control_cost(model, x0, x1, tm, grid, None, cs, settings, psi, TrajectoryMetric("L2"), w)


# --- serialization -----------------------------------------------------------------------


def _plain(obj):
    """Convert numpy containers and scalars to plain Python values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with every float written to 17 significant digits (``Infinity``/``NaN`` kept)."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        if math.isnan(obj):
            return "NaN"
        if math.isinf(obj):
            return "Infinity" if obj > 0 else "-Infinity"
        return format(obj, ".17g")
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    return json.dumps(str(obj))


def atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _trajectory_doc(traj):
    if traj is None:
        return None
    return {"times": traj.times, "states": traj.states, "controls": traj.controls, "params": traj.params}


def report_document(rep: M.MeasureReport) -> dict:
    return _plain({
        "measure_kind": rep.measure_kind,
        "value": float(rep.value),
        "sensitivity_ratio": rep.sensitivity_ratio,
        "bound": rep.bound,
        "lower_bound_flag": rep.lower_bound_flag,
        "solver": rep.solver,
        "feasibility": rep.feasibility,
        "details": rep.details,
        "worst_trajectory": _trajectory_doc(rep.worst_trajectory),
        "nominal_trajectory": _trajectory_doc(rep.nominal_trajectory),
    })


def verdict(rep: M.MeasureReport) -> int:
    """Exit code for a finished run: 2 for infeasible or unreachable verdicts."""
    if not math.isfinite(rep.value):
        return EXIT_VERDICT
    if rep.measure_kind == M.CONTROL_COST and not rep.details.get("reached", True):
        return EXIT_VERDICT
    if rep.feasibility and not rep.feasibility.get("constraints_ok", True):
        return EXIT_VERDICT
    return EXIT_OK


def trajectory_table(rep: M.MeasureReport, model, samples: int = 401) -> str:
    """Dense samples of the worst (or optimal) and nominal trajectories, one column per channel."""
    traj = rep.worst_trajectory or rep.nominal_trajectory
    tm = traj.time_map
    t = np.linspace(tm.t0, tm.t1, samples)
    cols = [("t", t)]
    names = list(model.state_names or [f"x{i + 1}" for i in range(model.state_dim)])
    cnames = list(model.control_names or [f"u{i + 1}" for i in range(model.control_dim)])
    for label, tr in (("", traj), ("nominal_", rep.nominal_trajectory)):
        if tr is None or (label and tr is traj):
            continue
        X = tr.sample(t, "states")
        for i, n in enumerate(names):
            cols.append((label + n, X[i]))
        if tr.controls.shape[0]:
            U = tr.sample(t, "controls")
            for i, n in enumerate(cnames):
                cols.append((label + n, U[i]))
    header = " ".join(f"{n:>24s}" for n, _ in cols)
    body = "\n".join(" ".join(f"{c[k]:24.17g}" for _, c in cols) for k in range(samples))
    return "# " + header.lstrip() + "\n" + body + "\n"


def output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "results"))


def _config_name(cfg: RunConfig, fallback: str) -> str:
    if cfg.output:
        return cfg.output
    return cfg.measure.get("label") or fallback


def run_config(cfg: RunConfig, name: str) -> tuple[dict, int]:
    """Execute and persist one run; returns ``(record, exit_code)``."""
    t0 = time.perf_counter()
    base = output_dir() / _config_name(cfg, name)
    record = {"schema_version": SCHEMA_VERSION, "artifact_version": artifact_version(), "config": cfg.to_dict()}
    try:
        rep = execute(cfg)
    except ConfigError:
        raise
    except Exception as exc:  # persist diagnostics, then fail
        record.update({"error": f"{type(exc).__name__}: {exc}", "wall_clock_s": time.perf_counter() - t0})
        atomic_write(base.parent / (base.name + ".json"), dumps(_plain(record)) + "\n")
        return record, EXIT_ERROR
    record["report"] = report_document(rep)
    record["per_start"] = _plain(rep.details.get("starts", []))
    record["wall_clock_s"] = time.perf_counter() - t0
    atomic_write(base.parent / (base.name + ".json"), dumps(_plain(record)) + "\n")
    model = _entry(cfg).model
    atomic_write(base.parent / (base.name + ".trajectory.txt"), trajectory_table(rep, model))
    record["_report"] = rep
    return record, verdict(rep)


# --- canned experiments ------------------------------------------------------------------

TABLE1 = {2: 4.70e-6, 3: 2.67e-5, 4: 1.53e-4, 5: 8.89e-4, 6: 5.20e-3, 7: 3.01e-2, 8: 1.75e-1, 9: 1.02}


def experiment_configs(exp_id: str) -> list[tuple[str, dict, float | None, str]]:
    """``(name, config, reference value, quantity)`` rows of a canned experiment."""
    if exp_id == "table1":
        return [(f"table1-n{n}", {
            "model": {"name": "chain", "params": {"n": n}},
            "measure": {"kind": "obs_ambiguity", "epsilon": 1e-6, "output_metric": "Linf",
                        "estimand_metric": "initial_value_norm", "horizon": [0, 15], "node_count": 30},
            "solver": {"starts": 4, "seed": 0}}, v, "value") for n, v in TABLE1.items()]
    if exp_id == "detectability":
        return [("detectability-n9", {
            "model": {"name": "chain", "params": {"n": 9}},
            "measure": {"kind": "detectability", "epsilon": 1e-6, "output_metric": "Linf", "horizon": [0, 10],
                        "node_count": 20},
            "solver": {"starts": 2, "seed": 0, "deviation_bound": 4096}}, 2.7328e-6, "value")]
    if exp_id == "vehicles":
        rows = []
        for ch, label, ref, rel in ((0, "x11", 1.2257, 2.8e-3), (2, "x12", 0.5901, 1.16e-2)):
            cfg = {"model": {"name": "vehicles"},
                   "measure": {"kind": "obs_ambiguity", "epsilon": [1e-2, 1e-2], "output_metric": "Linf",
                               "output_channels": [0, 2], "estimand": "estimand", "estimand_channels": [ch],
                               "estimand_metric": "L2", "initial_state": "free", "free_controls": [0],
                               "variation_bounds": {0: 3.0}, "node_count": 30},
                   "solver": {"starts": 3, "seed": 0}}
            rows.append((f"vehicles-{label}", cfg, ref, "value"))
            rows.append((f"vehicles-{label}", cfg, rel, "relative_ambiguity"))
        return rows
    if exp_id == "laub-loomis":
        return [("laub-loomis", {
            "model": {"name": "laub-loomis"},
            "measure": {"kind": "obs_ambiguity", "epsilon": 1e-2,
                        "output_metric": {"kind": "L2", "time_normalized": True},
                        "estimand": "estimand", "estimand_metric": "initial_value_norm", "initial_state": "fixed",
                        "free_params": [0, 5, 9], "param_box_fraction": 0.5, "node_count": 30},
            "solver": {"starts": 4, "seed": 0}}, 2.38e-2, "value")]
    if exp_id == "afm-gain":
        rows = []
        for k1, k2 in ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9)):
            rows.append((f"afm-gain-W{k1}{k2}", {
                "model": {"name": "afm"},
                "measure": {"kind": "lp_gain", "sigma": 0.03, "p": 2, "frequencies": [k1, k2], "node_count": 30},
                "solver": {"starts": 3, "seed": 0}}, 2.5707 if (k1, k2) == (0, 1) else None, "value"))
        return rows
    if exp_id == "afm-gramian":
        rows = []
        for k1, k2 in ((0, 1), (2, 3), (4, 5)):
            base = {"model": {"name": "afm"}, "solver": {"starts": 4, "seed": 0}}
            rows.append((f"afm-lp-W{k1}{k2}", dict(base, measure={
                "kind": "lp_gain", "sigma": 0.03, "p": 2, "frequencies": [k1, k2], "delta": 1.0, "node_count": 30}),
                None, "value"))
            rows.append((f"afm-gramian-W{k1}{k2}", dict(base, measure={
                "kind": "gramian_gain", "sigma": 0.03, "frequencies": [k1, k2], "delta": 1.0}), None, "value"))
        return rows
    if exp_id == "heat-sweep":
        amps = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2]
        return [(f"heat-A{a:.1f}", {
            "model": {"name": "heat-rod"},
            "measure": {"kind": "control_ambiguity", "target": {"arch": a}, "state_upper": 2.0, "node_count": 15},
            "solver": {"starts": 2, "seed": 0}}, 0.4 if a == 1.2 else None, "relative_ambiguity") for a in amps]
    raise ConfigError(f"experiment id: unknown {exp_id!r}; choose from {', '.join(EXPERIMENTS)}")


EXPERIMENTS = ("table1", "detectability", "vehicles", "laub-loomis", "afm-gain", "afm-gramian", "heat-sweep")


def _quantity(record, quantity):
    rep = record["report"]
    if quantity == "value":
        return rep["value"]
    return rep["details"].get(quantity, rep.get("sensitivity_ratio"))


def reproduce(exp_id: str, stream=None) -> tuple[list[dict], int]:
    stream = stream or sys.stdout
    rows = experiment_configs(exp_id)
    records: dict[str, dict] = {}
    table = []
    code = EXIT_OK
    for name, doc, ref, quantity in rows:
        if name not in records:
            rec, c = run_config(RunConfig.from_dict(doc), name)
            records[name] = rec
            code = max(code, c)
        rec = records[name]
        if "error" in rec:
            table.append((name, quantity, ref, None, None))
            continue
        val = _quantity(rec, quantity)
        dev = (val - ref) / ref if ref not in (None, 0) and val is not None else None
        table.append((name, quantity, ref, val, dev))
    if exp_id == "afm-gramian":
        for k in ("01", "23", "45"):
            lp, gr = records[f"afm-lp-W{k}"], records[f"afm-gramian-W{k}"]
            if "error" not in lp and "error" not in gr:
                a, b = lp["report"]["value"], gr["report"]["value"]
                table.append((f"afm-W{k}", "gramian vs lp relative gap", 0.19, abs(b - a) / a, (abs(b - a) / a - 0.19) / 0.19))
    lines = [f"{'run':<22s} {'quantity':<28s} {'reference':>12s} {'computed':>14s} {'rel. dev':>10s}"]
    for name, q, ref, val, dev in table:
        fmt = lambda v, w: f"{v:{w}.4g}" if isinstance(v, (int, float)) else f"{'-':>{w}s}"
        lines.append(f"{name:<22s} {q:<28s} {fmt(ref, 12)} {fmt(val, 14)} {fmt(dev, 10)}")
    text = "\n".join(lines) + "\n"
    stream.write(text)
    atomic_write(output_dir() / f"reproduce-{exp_id}.txt", text)
    for rec in records.values():
        rec.pop("_report", None)
    return list(records.values()), code


# --- entry point ---------------------------------------------------------------------------


def list_models(stream=None):
    stream = stream or sys.stdout
    for name, factory in CATALOG.items():
        entry = catalog_entry(name) if name != "chain" else catalog_entry("chain", n=2)
        m = entry.model
        stream.write(f"{name:<12s} states={m.state_dim:<3d} controls={m.control_dim:<2d} params={m.param_dim:<3d} "
                     f"horizon={list(entry.horizon)}  {entry.citation}\n")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ambiguity", description="Observability and controllability measures")
    sub = parser.add_subparsers(dest="verb", required=True)
    p_run = sub.add_parser("run", help="run the measure described by a config file")
    p_run.add_argument("config")
    p_rep = sub.add_parser("reproduce", help="run a canned experiment")
    p_rep.add_argument("id", choices=EXPERIMENTS)
    sub.add_parser("list-models", help="list catalog models")
    p_val = sub.add_parser("validate", help="check a config file without running it")
    p_val.add_argument("config")
    args = parser.parse_args(argv)
    try:
        if args.verb == "list-models":
            list_models()
            return EXIT_OK
        if args.verb == "validate":
            cfg = load_config(args.config)
            validate(cfg)
            print(f"{args.config}: ok ({cfg.kind} on {cfg.model})")
            return EXIT_OK
        if args.verb == "run":
            cfg = load_config(args.config)
            rec, code = run_config(cfg, Path(args.config).stem)
            if "error" in rec:
                print(f"error: {rec['error']}", file=sys.stderr)
            else:
                rep = rec["report"]
                print(f"{rep['measure_kind']}: value={rep['value']:.10g} ({rep['bound']} bound) "
                      f"ratio={rep['sensitivity_ratio']}")
            return code
        _, code = reproduce(args.id)
        return code
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
