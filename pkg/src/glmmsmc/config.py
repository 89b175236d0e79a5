"""Run configuration: defaults, presets, YAML files and ``key=value``
overrides merged into one plain nested dict.

Schema (every key optional except ``model.data`` for ``fit``)::

    label: run                  # groups replicate runs in ``compare``
    seed: 0
    output_dir: null            # default $GLMMSMC_OUTPUT_ROOT/<label>
    sampler: smc                # smc | rwmh | slice | is
    model:
      data: data.csv
      response: y
      family: poisson           # poisson | logit
      predictors: {x1: binary, x2: continuous}   # or categorical
      splines: [{column: x2, K: 10}]
      random_intercepts: []     # grouping columns
      intercept: true
      sigma_beta_sq: 1.0e8
      A: 0.01
    pql: {max_outer: 50, tol: 1.0e-6, inflate: 1.0}
    init: {nu: null, sigma_sq: null}   # skip PQL and centre on these estimates
    smc:
      n_particles: 1000
      n_stages: 105
      resample_threshold: 0.5
      partition: singleton      # singleton | one_block | by_class | [[names or indices], ...]
      tau: null                 # scalar, per-block list, or {fixed:, random:, spline:}
      workers: 1
      seed: null                # defaults to the top-level seed
    mcmc: {iters: 20000, burnin: 10000, chains: 1}
    slice: {width: 1.0}
    is: {n: 5000}
    output: {curve_points: 200, write_sample: true}
"""
from __future__ import annotations

import copy
import os
from pathlib import Path

import numpy as np
import yaml

from .errors import ValidationError
from .model import ModelSpec
from .smc import MoveConfig

OUTPUT_ROOT_ENV = "GLMMSMC_OUTPUT_ROOT"
SAMPLERS = ("smc", "rwmh", "slice", "is")

DEFAULTS = {
    "label": "run",
    "seed": 0,
    "output_dir": None,
    "sampler": "smc",
    "model": {
        "data": None,
        "response": "y",
        "family": "poisson",
        "predictors": {},
        "splines": [],
        "random_intercepts": [],
        "intercept": True,
        "sigma_beta_sq": 1.0e8,
        "A": 0.01,
    },
    "pql": {"max_outer": 50, "tol": 1.0e-6, "inflate": 1.0},
    "init": {"nu": None, "sigma_sq": None},
    "smc": {
        "n_particles": 1000,
        "n_stages": 105,
        "resample_threshold": 0.5,
        "partition": "singleton",
        "tau": None,
        "workers": 1,
        "seed": None,
    },
    "mcmc": {"iters": 20000, "burnin": 10000, "chains": 1},
    "slice": {"width": 1.0},
    "is": {"n": 5000},
    "output": {"curve_points": 200, "write_sample": True},
}

PRESETS = {
    "paper-4.1": {
        "label": "paper-4.1",
        "model": {
            "family": "poisson",
            "response": "y",
            "predictors": {"x1": "binary", "x2": "continuous"},
            "splines": [{"column": "x2", "K": 10}],
        },
        "smc": {"n_particles": 1000, "n_stages": 105, "partition": "singleton", "tau": 1.0 / 3.0},
        "mcmc": {"iters": 20000, "burnin": 10000},
        "is": {"n": 5000},
    },
    "paper-4.2-structure": {
        "label": "paper-4.2-structure",
        "model": {
            "family": "logit",
            "response": "y",
            "predictors": {"vitA": "binary", "male": "binary", "height": "continuous",
                           "stunted": "binary", "visit": "categorical"},
            "splines": [{"column": "age", "K": 20}],
            "random_intercepts": ["subject"],
        },
        "smc": {"n_particles": 1000, "n_stages": 305, "partition": "singleton",
                "tau": {"fixed": 3.0, "random": 6.0, "spline": 5.0}},
        "mcmc": {"iters": 10000, "burnin": 5000},
        "is": {"n": 5000},
    },
}


def deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (update or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> dict:
    """``"smc.n_stages=50"`` to ``{"smc": {"n_stages": 50}}``; the value is
    parsed as YAML so numbers, lists and mappings work."""
    if "=" not in item:
        raise ValidationError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ValidationError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse value in override {item!r}: {exc}") from exc
    out = value
    for p in reversed(parts):
        out = {p: out}
    return out


def load_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise OSError(f"config file {path} not found") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ValidationError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"config file {path} must hold a mapping")
    return data


def resolve(preset=None, path=None, overrides=()) -> dict:
    """Defaults, then preset, then file, then overrides; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if preset:
        if preset not in PRESETS:
            raise ValidationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = deep_merge(cfg, PRESETS[preset])
    if path:
        cfg = deep_merge(cfg, load_file(path))
    for item in overrides:
        cfg = deep_merge(cfg, parse_override(item) if isinstance(item, str) else item)
    validate(cfg)
    return cfg


def _positive_int(cfg, section, key, minimum=1):
    v = cfg[section][key]
    if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < minimum:
        raise ValidationError(f"{section}.{key} must be an integer >= {minimum}, got {v!r}")


def validate(cfg: dict):
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ValidationError(f"unknown config sections {sorted(unknown)}")
    if cfg["sampler"] not in SAMPLERS:
        raise ValidationError(f"sampler must be one of {SAMPLERS}, got {cfg['sampler']!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ValidationError("seed must be a non-negative integer")
    _positive_int(cfg, "smc", "n_particles", 2)
    _positive_int(cfg, "smc", "n_stages", 6)
    _positive_int(cfg, "smc", "workers")
    _positive_int(cfg, "mcmc", "iters")
    _positive_int(cfg, "mcmc", "burnin", 0)
    _positive_int(cfg, "mcmc", "chains")
    _positive_int(cfg, "is", "n")
    _positive_int(cfg, "output", "curve_points", 2)
    if cfg["mcmc"]["iters"] <= cfg["mcmc"]["burnin"]:
        raise ValidationError("mcmc.iters must exceed mcmc.burnin")
    if not 0 <= float(cfg["smc"]["resample_threshold"]) <= 1:
        raise ValidationError("smc.resample_threshold must lie in [0, 1]")
    if not float(cfg["slice"]["width"]) > 0:
        raise ValidationError("slice.width must be positive")
    sseed = cfg["smc"]["seed"]
    if sseed is not None and (not isinstance(sseed, int) or sseed < 0):
        raise ValidationError("smc.seed must be a non-negative integer")
    if cfg["init"]["sigma_sq"] is not None and cfg["init"]["nu"] is None:
        raise ValidationError("init.sigma_sq needs init.nu")
    if not isinstance(cfg["model"]["predictors"], dict):
        raise ValidationError("model.predictors must map column names to roles")


def output_dir(cfg: dict) -> Path:
    if cfg.get("output_dir"):
        return Path(cfg["output_dir"])
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / str(cfg["label"])


def _resolve_index(item, model: ModelSpec):
    if isinstance(item, str):
        if item not in model.names:
            raise ValidationError(f"partition names unknown coefficient {item!r}")
        return model.names.index(item)
    return int(item)


def move_config(cfg: dict, model: ModelSpec) -> MoveConfig:
    """Blocks and multipliers from ``smc.partition`` and ``smc.tau``."""
    part = cfg["smc"]["partition"]
    tau = cfg["smc"]["tau"]
    if isinstance(tau, dict):
        if part not in ("singleton", "by_class", "by_class_grouped"):
            raise ValidationError("tau by column class needs a singleton or by_class partition")
        return MoveConfig.by_class(model, {k: float(v) for k, v in tau.items()},
                                   grouped=part == "by_class_grouped")
    if part == "singleton" or part == "by_class":
        mc = MoveConfig.singleton(model.P, tau)
    elif part == "one_block":
        mc = MoveConfig.one_block(model.P, tau)
    elif isinstance(part, list):
        blocks = [[_resolve_index(i, model) for i in np.atleast_1d(b).tolist()] for b in part]
        mc = MoveConfig.from_blocks(blocks, tau)
    else:
        raise ValidationError(f"unknown partition {part!r}")
    mc.validate(model.P)
    return mc
