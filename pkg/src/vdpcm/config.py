"""YAML run configuration.

A config file is merged over the shipped defaults, so it only needs the
keys it changes.  Unknown keys, wrong types and model-level violations are
reported with the file name and line of the offending entry.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import discretization as disc
from . import physics
from .physics import ModelSpec, RawKinetics, Variant
from .stepper import H5Error, SolverConfig, initial_state


class ConfigError(ValueError):
    """Invalid configuration, with location when known."""


# leaf kinds: "float", "float?", "int", "bool", "str", "floats", "matrix", "grid", or a tuple of choices
_PROFILE = {"base": "float", "slope": "float", "bump": "float"}
SCHEMA = {
    "model": {
        "variant": tuple(v.value for v in Variant),
        "lambda2": "float", "V": "float", "z1": "int", "z2": "int", "rho_hl": "float",
        "d1": "float", "d2": "float", "ubar1": "float", "ubar2": "float", "ubar2_met": "float",
        "interface": {"alpha0": "float", "alpha1": "float", "dpsi_pzc0": "float", "dpsi_pzc1": "float",
                      "k": "matrix", "m": "matrix"},
    },
    "mesh": {"cells": "int"},
    "solver": {
        "dt": "float", "newton_tol": "float", "newton_max_iter": "int", "armijo": "float",
        "min_damping": "float", "M": "float?", "mu": "float?", "steady_tol": "float",
        "implicit": "bool", "jacobian": ("analytic", "fd"),
        "cation_scheme": tuple(s.value for s in disc.FluxScheme),
        "electron_scheme": tuple(s.value for s in disc.FluxScheme),
    },
    "initial": {"u1": _PROFILE, "u2": _PROFILE},
    "run": {"t_end": "float", "snapshot_times": "floats"},
    "sweep": {"V": "grid", "t_max": "float", "dt": "float?", "initial": ("uniform", "profile")},
    "compare": {"snapshot_times": "floats", "dt": "float?"},
    "output": {"dir": "str?", "V_offset": "float", "V_scale": "float"},
}


def _where(source, node):
    return f"{source}:{node.start_mark.line + 1}" if node is not None else source


def _scalar(node, source, path):
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"{_where(source, node)}: {path} must be a scalar")
    return yaml.safe_load(yaml.serialize(node))


def _leaf(kind, node, source, path):
    loc = _where(source, node)
    if kind in ("floats", "matrix", "grid") and not isinstance(node, yaml.ScalarNode):
        value = yaml.safe_load(yaml.serialize(node))
    else:
        value = _scalar(node, source, path)
    if isinstance(kind, tuple):
        if value not in kind:
            raise ConfigError(f"{loc}: {path} must be one of {', '.join(kind)}, got {value!r}")
        return value
    if kind.endswith("?"):
        if value is None:
            return None
        kind = kind[:-1]
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{loc}: {path} must be a finite number, got {value!r}")
        return float(value)
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{loc}: {path} must be an integer, got {value!r}")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{loc}: {path} must be true or false, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{loc}: {path} must be a string, got {value!r}")
        return value
    if kind == "floats":
        if not isinstance(value, list) or not all(_is_num(v) for v in value):
            raise ConfigError(f"{loc}: {path} must be a list of finite numbers")
        return [float(v) for v in value]
    if kind == "matrix":
        if not (isinstance(value, list) and len(value) == 2
                and all(isinstance(r, list) and len(r) == 2 and all(_is_num(v) for v in r) for r in value)):
            raise ConfigError(f"{loc}: {path} must be a 2x2 list of numbers [species][interface]")
        return [[float(v) for v in r] for r in value]
    if kind == "grid":
        if isinstance(value, list) and value and all(_is_num(v) for v in value):
            return [float(v) for v in value]
        if isinstance(value, dict) and set(value) == {"start", "stop", "num"} \
                and _is_num(value["start"]) and _is_num(value["stop"]) \
                and isinstance(value["num"], int) and value["num"] >= 1:
            return {"start": float(value["start"]), "stop": float(value["stop"]), "num": value["num"]}
        raise ConfigError(f"{loc}: {path} must be a nonempty list of numbers or {{start, stop, num}}")
    raise AssertionError(kind)


def _is_num(v):
    return not isinstance(v, bool) and isinstance(v, (int, float)) and math.isfinite(v)


def _merge(schema, node, source, data, marks, prefix=""):
    """Validate mapping ``node`` against ``schema`` and merge it into ``data``."""
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{_where(source, node)}: {prefix or 'config'} must be a mapping")
    seen = set()
    for knode, vnode in node.value:
        key = _scalar(knode, source, prefix or "key")
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in schema:
            raise ConfigError(f"{_where(source, knode)}: unknown key {path!r}")
        if key in seen:
            raise ConfigError(f"{_where(source, knode)}: duplicate key {path!r}")
        seen.add(key)
        marks[path] = vnode.start_mark.line + 1
        sub = schema[key]
        if isinstance(sub, dict):
            _merge(sub, vnode, source, data[key], marks, path)
        else:
            data[key] = _leaf(sub, vnode, source, path)


def _default_text():
    return resources.files("vdpcm").joinpath("data/default.yaml").read_text(encoding="utf-8")


def _compose(text, source):
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: parse error: {getattr(exc, 'problem', exc)}") from None
    return node


def _skeleton(schema):
    return {k: _skeleton(v) if isinstance(v, dict) else None for k, v in schema.items()}


_DEFAULTS = None


def default_data():
    global _DEFAULTS
    if _DEFAULTS is None:
        data = _skeleton(SCHEMA)
        _merge(SCHEMA, _compose(_default_text(), "default.yaml"), "default.yaml", data, {})
        _DEFAULTS = data
    return copy.deepcopy(_DEFAULTS)


def profile_values(prof, x):
    return prof["base"] + prof["slope"] * (x - 0.5) + prof["bump"] * np.sin(np.pi * x)


@dataclass
class RunConfig:
    """Validated configuration; ``data`` mirrors the YAML layout."""

    data: dict
    source: str = field(default="<defaults>", compare=False)
    marks: dict = field(default_factory=dict, compare=False)

    def _err(self, path, msg):
        line = self.marks.get(path)
        if line == "cli":
            loc = "command line"
        else:
            loc = f"{self.source}:{line}" if line else self.source
        return ConfigError(f"{loc}: {path}: {msg}")

    # -- derived objects ----------------------------------------------------
    def raw_kinetics(self):
        itf = self.data["model"]["interface"]
        try:
            return RawKinetics(k=tuple(map(tuple, itf["k"])), m=tuple(map(tuple, itf["m"])))
        except physics.ModelError as exc:
            table = "k" if "constant k_" in str(exc) else "m"
            raise self._err(f"model.interface.{table}", str(exc)) from None

    def spec(self):
        m = self.data["model"]
        itf = m["interface"]
        raw = self.raw_kinetics()
        try:
            return ModelSpec.from_interface(
                raw, lambda2=m["lambda2"], alpha0=itf["alpha0"], alpha1=itf["alpha1"],
                V=m["V"], dpsi_pzc0=itf["dpsi_pzc0"], dpsi_pzc1=itf["dpsi_pzc1"], z1=m["z1"], z2=m["z2"],
                rho_hl=m["rho_hl"], d1=m["d1"], d2=m["d2"], ubar1=m["ubar1"], ubar2=m["ubar2"],
                ubar2_met=m["ubar2_met"], variant=Variant(m["variant"]))
        except (physics.ModelError, ValueError) as exc:
            raise self._err("model", str(exc)) from None

    def mesh(self):
        try:
            return disc.Mesh(self.data["mesh"]["cells"])
        except ValueError as exc:
            raise self._err("mesh.cells", str(exc)) from None

    def solver(self, dt=None):
        s = self.data["solver"]
        try:
            return SolverConfig(
                dt=s["dt"] if dt is None else dt, newton_tol=s["newton_tol"],
                newton_max_iter=s["newton_max_iter"], armijo=s["armijo"], min_damping=s["min_damping"],
                M=s["M"], mu=s["mu"], steady_tol=s["steady_tol"], implicit=s["implicit"],
                jacobian=s["jacobian"], schemes={1: s["cation_scheme"], 2: s["electron_scheme"]})
        except ValueError as exc:
            raise self._err("solver", str(exc)) from None

    def initial_fields(self, mesh=None):
        mesh = self.mesh() if mesh is None else mesh
        x = mesh.centers
        ini = self.data["initial"]
        return profile_values(ini["u1"], x), profile_values(ini["u2"], x)

    def initial_state(self, spec=None, mesh=None):
        spec = self.spec() if spec is None else spec
        mesh = self.mesh() if mesh is None else mesh
        u1, u2 = self.initial_fields(mesh)
        try:
            return initial_state(u1, u2, spec, mesh)
        except H5Error as exc:
            species = "u1" if "u1" in str(exc) else "u2"
            raise self._err(f"initial.{species}", f"admissibility (H5) violated: {exc}") from None

    def sweep_values(self):
        grid = self.data["sweep"]["V"]
        if isinstance(grid, dict):
            return [float(v) for v in np.round(np.linspace(grid["start"], grid["stop"], grid["num"]), 12)]
        return list(grid)

    def output_dir(self):
        from .io import default_output_dir
        d = self.data["output"]["dir"]
        return Path(d) if d else default_output_dir()

    # -- validation and overrides ------------------------------------------
    def validate(self):
        spec = self.spec()
        mesh = self.mesh()
        cfg = self.solver()
        for key in ("sweep.dt", "compare.dt"):
            sec, name = key.split(".")
            if self.data[sec][name] is not None:
                self.solver(dt=self.data[sec][name])
        self.initial_state(spec, mesh)
        if not self.data["run"]["t_end"] > 0:
            raise self._err("run.t_end", "must be > 0")
        for key in ("run.snapshot_times", "compare.snapshot_times"):
            sec, name = key.split(".")
            if any(t < 0 for t in self.data[sec][name]):
                raise self._err(key, "snapshot times must be >= 0")
        if not self.data["sweep"]["t_max"] > 0:
            raise self._err("sweep.t_max", "must be > 0")
        if self.data["output"]["V_scale"] == 0:
            raise self._err("output.V_scale", "must be nonzero")
        if cfg.M is not None and cfg.mu is not None:
            c1 = disc.h1_norm(*disc.solve_poisson(self.initial_state(spec, mesh).u0, spec, mesh), mesh)
            bound = cfg.M - max(abs(spec.z(i)) * c1 + max(abs(x) for x in spec.xi_ext[i - 1])
                                for i in physics.SPECIES)
            if cfg.mu > bound:
                raise self._err("solver.mu", f"mu={cfg.mu} exceeds the admissible bound {bound:.6g} for M={cfg.M}")
        return self

    def override(self, path, value):
        """Set a dotted key, checked against the schema; returns a new config."""
        sub = SCHEMA
        keys = path.split(".")
        for k in keys[:-1]:
            sub = sub[k]
        kind = sub[keys[-1]]
        node = yaml.compose(yaml.safe_dump(value))
        data = copy.deepcopy(self.data)
        tgt = data
        for k in keys[:-1]:
            tgt = tgt[k]
        tgt[keys[-1]] = _leaf(kind, node, "override", path)
        marks = dict(self.marks)
        marks[path] = "cli"
        return RunConfig(data, self.source, marks).validate()

    def dump(self):
        return yaml.safe_dump(self.data, sort_keys=False, default_flow_style=None)

    def write(self, path):
        Path(path).write_text(self.dump(), encoding="utf-8")


def loads(text, source="<string>"):
    data = default_data()
    marks = {}
    node = _compose(text, source)
    if node is not None:
        _merge(SCHEMA, node, source, data, marks)
    return RunConfig(data, source, marks).validate()


def load_config(path=None):
    """Load and validate a YAML config; ``None`` gives the shipped defaults."""
    if path is None:
        return loads(_default_text(), "default.yaml")
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return loads(text, str(path))


def default_config_path():
    return resources.files("vdpcm").joinpath("data/default.yaml")
