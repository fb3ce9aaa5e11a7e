"""Declarative scenario files.

A scenario is a YAML (or JSON, which YAML also reads) mapping with the
sections ``plant``, ``spec``, ``controller``, ``sim``, ``disturbance``,
``initial``, ``analysis`` and ``output``. `resolve` fills every default
and checks dimensions, so the resolved mapping is a complete, reloadable
description of a run.
"""

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .analysis import CertifyOptions
from .controller import ControllerConfig
from .exceptions import ConfigurationError, DimensionError
from .plants import make_plant
from .problem import make_spec
from .simulator import SimConfig

__all__ = ["Scenario", "load_scenario", "resolve", "bundled_scenarios", "scenario_hash"]

SECTIONS = ("name", "plant", "spec", "controller", "sim", "disturbance", "initial", "analysis", "output")

DEFAULTS = {
    "controller": {"beta": 10.0, "eta": 0.1, "qp_tol": 1e-9, "qp_max_iter": 200},
    "sim": {"dt": 1e-3, "t_end": 200.0, "integrator": "rk4", "record_stride": 100, "halt_on_infeasible": True},
    "analysis": {
        "kappa": 1.0, "s": None, "delta": 0.5, "n_samples": 200, "seed": 0,
        "d_constants": None, "r0": None, "alpha_0": None, "optimize_kappa": False,
        "region": "local", "x_radius": None, "n_u_slices": 5,
    },
    "output": {"csv": "trajectory.csv"},
}


def bundled_scenarios():
    """Names of the scenarios shipped with the package."""
    root = resources.files("safeflow") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def _read_text(source):
    path = Path(source)
    if path.exists():
        return path.read_text(), str(path)
    if source in bundled_scenarios():
        res = resources.files("safeflow") / "scenarios" / f"{source}.yaml"
        return res.read_text(), f"<bundled:{source}>"
    raise ConfigurationError(f"scenario {source!r} is neither a file nor a bundled scenario {bundled_scenarios()}")


def scenario_hash(text):
    """Git-style blob hash (sha1 over ``blob <len>\\0`` + content)."""
    data = text.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _parse(text, origin):
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigurationError(f"{origin}:{where}: {problem}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{origin}: top level must be a mapping")
    return raw


def _merge(section, given, defaults):
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigurationError(f"section {section!r} must be a mapping")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigurationError(f"section {section!r}: unknown field(s) {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


def _vector(value, dim, field):
    try:
        v = np.asarray(value, dtype=float).reshape(-1)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{field}: expected a list of numbers, got {value!r}") from None
    if v.shape[0] != dim:
        raise DimensionError(f"{field}: expected length {dim}, got {v.shape[0]}")
    return v.tolist()


class Scenario:
    """Resolved scenario with the model objects built from it."""

    def __init__(self, config, source_text=None, origin=None):
        self.config = config
        self.source_text = source_text
        self.origin = origin
        self.plant = make_plant(config["plant"])
        self.spec = make_spec(config["spec"])
        try:
            self.controller = ControllerConfig(**config["controller"])
            self.sim = SimConfig(**config["sim"])
            self.analysis = CertifyOptions(**config["analysis"])
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from None
        self.w = np.asarray(config["disturbance"], dtype=float)
        self.x0 = np.asarray(config["initial"]["x0"], dtype=float)
        self.u0 = np.asarray(config["initial"]["u0"], dtype=float)

    @property
    def name(self):
        return self.config["name"]

    @property
    def z0(self):
        return np.concatenate([self.x0, self.u0])

    @property
    def hash(self):
        text = self.source_text if self.source_text is not None else json.dumps(self.config, sort_keys=True)
        return scenario_hash(text)

    def to_json(self):
        return json.dumps(self.config, indent=2, sort_keys=True)

    def with_overrides(self, section, **values):
        cfg = copy.deepcopy(self.config)
        cfg[section].update(values)
        return Scenario(resolve(cfg), None, self.origin)


def resolve(raw):
    """Fill defaults, build nothing, check dimensions; return a plain dict."""
    raw = dict(raw)
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown section(s) {sorted(unknown)}; expected {list(SECTIONS)}")
    for required in ("plant", "spec", "initial"):
        if required not in raw:
            raise ConfigurationError(f"missing section {required!r}")
    cfg = {"name": str(raw.get("name", "scenario"))}
    cfg["plant"] = copy.deepcopy(raw["plant"])
    cfg["spec"] = copy.deepcopy(raw["spec"])
    for section in ("controller", "sim", "analysis", "output"):
        cfg[section] = _merge(section, raw.get(section), DEFAULTS[section])
    # float fields may come in as strings such as "1e-3" from some YAML writers
    for section, keys in (("controller", ("beta", "eta", "qp_tol")), ("sim", ("dt", "t_end"))):
        for k in keys:
            try:
                cfg[section][k] = float(cfg[section][k])
            except (TypeError, ValueError):
                raise ConfigurationError(f"{section}.{k}: expected a number, got {cfg[section][k]!r}") from None
    for k in ("qp_max_iter",):
        cfg["controller"][k] = int(cfg["controller"][k])
    cfg["sim"]["record_stride"] = int(cfg["sim"]["record_stride"])

    plant = make_plant(cfg["plant"])
    spec = make_spec(cfg["spec"])
    cfg["plant"] = plant.to_config()
    if plant.n_y != spec.n_x or plant.n_u != spec.n_u:
        raise DimensionError(
            f"plant output/input dims ({plant.n_y}, {plant.n_u}) do not match spec ({spec.n_x}, {spec.n_u})"
        )
    init = raw["initial"]
    if not isinstance(init, dict) or set(init) - {"x0", "u0"}:
        raise ConfigurationError("section 'initial' needs exactly the fields x0 and u0")
    cfg["initial"] = {
        "x0": _vector(init.get("x0", np.zeros(plant.n_x)), plant.n_x, "initial.x0"),
        "u0": _vector(init.get("u0", np.zeros(plant.n_u)), plant.n_u, "initial.u0"),
    }
    cfg["disturbance"] = _vector(raw.get("disturbance", np.zeros(plant.n_w)), plant.n_w, "disturbance")
    return cfg


def load_scenario(source):
    """Load a scenario from a path or bundled name and resolve it."""
    text, origin = _read_text(source)
    raw = _parse(text, origin)
    return Scenario(resolve(raw), text, origin)
