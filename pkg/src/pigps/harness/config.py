"""Experiment configuration: a versioned YAML document with nested sections.

    schema: pigps.experiment/1
    name: point_mass_pigps
    environment: {name: point_mass, params: {goal: [0.4, -0.3]}}
    instances: {low: {goal: [...]}, high: {goal: [...]}}
    gps: {...}                      # GpsConfig fields
    evaluation: {n_eval: 1, seed: 1000, every: 1}
    output: {dir: runs/pm, checkpoint_every: 10}
    seeds: [0, 1, 2]

Every problem found while parsing is collected and reported together.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import yaml

from ..envs import ENVS, InstanceDistribution, make_env
from ..gps import GpsConfig

SCHEMA = "pigps.experiment/1"
SECTIONS = ("schema", "name", "environment", "instances", "gps", "evaluation", "output", "seeds")
INIT_TARGETS = ("nominal", "instance")


class ConfigError(ValueError):
    """Invalid experiment config; ``problems`` lists every violation found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid experiment config:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class ExperimentConfig:
    name: str
    environment: str
    env_params: dict
    low: dict
    high: dict
    gps: GpsConfig
    n_eval: int = 1
    eval_seed: int = 1000
    eval_every: int = 1
    out: str = "runs/experiment"
    checkpoint_every: int = 10
    seeds: list = field(default_factory=lambda: [0])
    init_target: str = "nominal"

    def make_env(self):
        return make_env(self.environment, **_arrays_or_raw(self.env_params))

    def distribution(self):
        return InstanceDistribution(_arrays(self.low), _arrays(self.high))

    def protocol(self):
        """Settings two runs must share to be comparable."""
        return {
            "environment": self.environment,
            "env_params": self.env_params,
            "horizon": int(self.make_env().T),
            "instances": {"low": self.low, "high": self.high},
            "n_eval": self.n_eval,
            "eval_seed": self.eval_seed,
            "eval_every": self.eval_every,
            "iterations": self.gps.local_iterations + self.gps.global_iterations,
        }

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "name": self.name,
            "environment": {"name": self.environment, "params": copy.deepcopy(self.env_params)},
            "instances": {"low": copy.deepcopy(self.low), "high": copy.deepcopy(self.high),
                          "init_target": self.init_target},
            "gps": self.gps.to_dict(),
            "evaluation": {"n_eval": self.n_eval, "seed": self.eval_seed, "every": self.eval_every},
            "output": {"dir": self.out, "checkpoint_every": self.checkpoint_every},
            "seeds": list(self.seeds),
        }

    def dumps(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d):
        return parse(d)


def _arrays(d):
    return {k: np.asarray(v, float) for k, v in d.items()}


def _plain(v):
    """YAML-friendly copy: tuples to lists, numpy scalars/arrays to python values."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_plain(x) for x in (v.tolist() if isinstance(v, np.ndarray) else v)]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _section(d, key, problems):
    v = d.get(key)
    if not isinstance(v, dict):
        problems.append(f"{key}: missing or not a mapping")
        return {}
    return v


def _int(sec, key, default, problems, where, minimum=0):
    v = sec.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        problems.append(f"{where}.{key}: expected an integer >= {minimum}, got {v!r}")
        return default
    return v


def parse(d):
    """Validate a config mapping and build an ExperimentConfig (ConfigError on any problem)."""
    problems = []
    if not isinstance(d, dict):
        raise ConfigError(["config must be a mapping"])
    for key in sorted(set(d) - set(SECTIONS)):
        problems.append(f"unknown section {key!r}")
    if d.get("schema") != SCHEMA:
        problems.append(f"schema: expected {SCHEMA!r}, got {d.get('schema')!r}")
    name = d.get("name")
    if not isinstance(name, str) or not name:
        problems.append("name: missing or empty")

    env_sec = _section(d, "environment", problems)
    env_name = env_sec.get("name")
    env_params = _plain(env_sec.get("params") or {})
    if env_name not in ENVS:
        problems.append(f"environment.name: expected one of {sorted(ENVS)}, got {env_name!r}")
    else:
        try:
            make_env(env_name, **_arrays_or_raw(env_params))
        except (TypeError, ValueError) as err:
            problems.append(f"environment.params: {err}")

    inst = _section(d, "instances", problems)
    low, high = _plain(inst.get("low") or {}), _plain(inst.get("high") or {})
    init_target = inst.get("init_target", "nominal")
    if init_target not in INIT_TARGETS:
        problems.append(f"instances.init_target: expected one of {INIT_TARGETS}")
    if env_name in ENVS:
        cls = ENVS[env_name]
        allowed = {"x0", *cls.instance_params}
        for key in sorted((set(low) | set(high)) - allowed):
            problems.append(f"instances: {key!r} is not an instance parameter of {env_name}")
        if "x0" in low and np.size(low["x0"]) != cls.dX:
            problems.append(f"instances: x0 must have {cls.dX} entries")
    try:
        InstanceDistribution(_arrays(low), _arrays(high))
    except (TypeError, ValueError) as err:
        problems.append(f"instances: {err}")

    gps_sec = _section(d, "gps", problems)
    gps = GpsConfig()
    try:
        gps = GpsConfig.from_dict(gps_sec)
        problems.extend(f"gps: {p}" for p in gps.validate())
    except (TypeError, ValueError) as err:
        problems.append(f"gps: {err}")

    ev = _section(d, "evaluation", problems)
    n_eval = _int(ev, "n_eval", 1, problems, "evaluation", minimum=1)
    eval_seed = _int(ev, "seed", 1000, problems, "evaluation")
    eval_every = _int(ev, "every", 1, problems, "evaluation")

    out_sec = _section(d, "output", problems)
    out = out_sec.get("dir")
    if not isinstance(out, str) or not out:
        problems.append("output.dir: missing or empty")
    checkpoint_every = _int(out_sec, "checkpoint_every", 10, problems, "output")

    seeds = d.get("seeds")
    if (not isinstance(seeds, list) or not seeds
            or any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in seeds)):
        problems.append("seeds: expected a non-empty list of non-negative integers")
    elif len(set(seeds)) != len(seeds):
        problems.append("seeds: duplicates")

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        name=name, environment=env_name, env_params=env_params, low=low, high=high, gps=gps,
        n_eval=n_eval, eval_seed=eval_seed, eval_every=eval_every, out=out,
        checkpoint_every=checkpoint_every, seeds=list(seeds), init_target=init_target,
    )


def _arrays_or_raw(params):
    return {k: np.asarray(v, float) if isinstance(v, list) else v for k, v in params.items()}


def loads(text):
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError([f"not valid YAML: {err}"]) from None
    return parse(d)


def load(path):
    with open(path) as f:
        return loads(f.read())


def _set_path(d, dotted, value):
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        if not isinstance(cur.get(k), dict):
            cur[k] = {}
        cur = cur[k]
    cur[keys[-1]] = value


def apply_overrides(d, overrides):
    """Return a copy of a raw config mapping with ``key.path=value`` overrides applied.

    Values are parsed as YAML scalars/flow collections, so ``gps.epsilon=0.5``
    sets a float and ``seeds=[1,2]`` a list.
    """
    d = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not of the form key=value"])
        key, raw = item.split("=", 1)
        if not key:
            raise ConfigError([f"override {item!r} has an empty key"])
        _set_path(d, key.strip(), yaml.safe_load(raw))
    return d
