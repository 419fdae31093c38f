"""Experiment configuration: TOML files with an explicit schema version.

A config names one experiment ``kind`` and carries the blocks that kind
needs.  Parsing checks field names and types up front and reports errors as
``block.field: reason`` so a bad file fails before any compute starts.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .baselines import PrimalDualConfig
from .envs import ContinuousMonitoringEnv, EnvError, TabularCmdp, default_regions, monitoring_mdp3
from .executor import ExecConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1
KINDS = ("tabular-acrl", "continuous-acrl", "primal-dual", "oracle-certify", "t0-sweep", "primal-average")
ENVIRONMENTS = ("monitoring3", "continuous-monitoring")

# blocks each kind must carry (environment is always required)
REQUIRED = {
    "tabular-acrl": ("executor",),
    "continuous-acrl": ("trainer", "executor"),
    "primal-dual": ("primal_dual",),
    "oracle-certify": (),
    "t0-sweep": ("executor", "sweep"),
    "primal-average": ("executor",),
}
OPTIONAL = {
    "tabular-acrl": ("checks",),
    "continuous-acrl": ("policy", "checks"),
    "primal-dual": ("executor", "checks"),
    "oracle-certify": ("oracle", "checks"),
    "t0-sweep": ("checks",),
    "primal-average": ("averaging", "checks"),
}
TOP_LEVEL = {"schema_version", "kind", "seeds", "output_dir", "environment"}


class ConfigError(ValueError):
    pass


# field name -> accepted python types, for blocks not backed by a dataclass
_ENV_FIELDS = {
    "name": (str,),
    "thresholds": (list,),
    "regions": (list,),
    "low": (list,),
    "high": (list,),
    "max_step": (int, float),
}
_POLICY_FIELDS = {
    "n_spatial": (int,),
    "n_lambda": (int,),
    "sigma": (int, float),
    "bandwidth_scale": (int, float),
    "lambda_bandwidth_scale": (int, float),
}
_CHECK_FIELDS = {
    "feasibility_tol": (int, float),
    "objective_tol": (int, float),
    "slackness_tol": (int, float),
    "deficit_tol": (int, float),
    "probe_fraction": (int, float),
    "probe_lambda": (list,),
    "probe_region": (int,),
    "seed_fraction": (int, float),
    "reference_slack": (int, float),
    "duality_tol": (int, float),
    "argmin_tol": (int, float),
    "argmin_target": (list,),
    "inclusion_tol": (int, float),
}
_SWEEP_FIELDS = {"T0_values": (list,), "total_steps": (int,)}
_AVERAGING_FIELDS = {"steps": (int,), "T0": (int,)}
_ORACLE_FIELDS = {"grid_high": (int, float), "grid_step": (int, float), "refine_step": (int, float)}

DEFAULT_CHECKS = {
    "feasibility_tol": 0.02,
    "objective_tol": 0.02,
    "slackness_tol": 0.05,
    "deficit_tol": 1e-12,
    "probe_fraction": 0.9,
    "probe_region": 1,
    "seed_fraction": 0.75,
    "reference_slack": 0.1,
    "duality_tol": 1e-6,
    "argmin_tol": 0.01,
    "inclusion_tol": 1e-9,
}


@dataclass
class ExperimentConfig:
    kind: str
    seeds: list[int]
    output_dir: str
    environment: dict
    blocks: dict[str, dict] = field(default_factory=dict)
    source_text: str = ""
    source: str = "<string>"

    @property
    def config_hash(self) -> str:
        return config_hash(self.source_text)

    def block(self, name: str) -> dict:
        return dict(self.blocks.get(name, {}))

    @property
    def checks(self) -> dict:
        out = dict(DEFAULT_CHECKS)
        out.update(self.blocks.get("checks", {}))
        return out


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _check_types(block: str, data: dict, schema: dict) -> None:
    for key, value in data.items():
        if key not in schema:
            raise ConfigError(f"{block}: unknown field {key!r}")
        types = schema[key]
        if isinstance(value, bool) or not isinstance(value, types):
            names = " or ".join(t.__name__ for t in types)
            raise ConfigError(f"{block}.{key}: expected {names}, got {type(value).__name__}")


def _dataclass_block(block: str, data: dict, cls, drop=()) -> Any:
    allowed = {f.name for f in fields(cls)} - set(drop)
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{block}: unknown field {key!r}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{block}: {exc}") from None


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    """Parse and validate a config; raises :class:`ConfigError` with a located message."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line, col = getattr(exc, "lineno", None), getattr(exc, "colno", None)
        if line is None:
            raise ConfigError(f"{source}: {exc}") from None
        raise ConfigError(f"{source}: line {line}, column {col}: {getattr(exc, 'msg', exc)}") from None

    if "schema_version" not in raw:
        raise ConfigError("schema_version: missing field")
    if raw["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported version {raw['schema_version']!r} (expected {SCHEMA_VERSION})")
    kind = raw.get("kind")
    if kind is None:
        raise ConfigError("kind: missing field")
    if kind not in KINDS:
        raise ConfigError(f"kind: unknown experiment kind {kind!r} (expected one of {', '.join(KINDS)})")

    allowed = TOP_LEVEL | set(REQUIRED[kind]) | set(OPTIONAL[kind])
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{key}: not allowed for kind {kind!r}")
    for name in ("environment",) + REQUIRED[kind]:
        if name not in raw:
            raise ConfigError(f"{name}: missing block required by kind {kind!r}")
        if not isinstance(raw[name], dict):
            raise ConfigError(f"{name}: must be a table")

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds: must be a non-empty list of integers")
    if any(s < 0 for s in seeds):
        raise ConfigError("seeds: must be nonnegative")
    output_dir = raw.get("output_dir", kind)
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir: must be a non-empty string")

    env = dict(raw["environment"])
    _check_types("environment", env, _ENV_FIELDS)
    if "name" not in env:
        raise ConfigError("environment.name: missing field")
    if env["name"] not in ENVIRONMENTS:
        raise ConfigError(f"environment.name: unknown environment {env['name']!r}")
    if "thresholds" not in env:
        raise ConfigError("environment.thresholds: missing field")
    tabular_kinds = {"tabular-acrl", "primal-dual", "oracle-certify", "primal-average"}
    if kind in tabular_kinds and env["name"] != "monitoring3":
        raise ConfigError(f"environment.name: kind {kind!r} needs a tabular environment")
    if kind == "continuous-acrl" and env["name"] != "continuous-monitoring":
        raise ConfigError("environment.name: kind 'continuous-acrl' needs the continuous environment")

    blocks: dict[str, dict] = {}
    for name in REQUIRED[kind] + OPTIONAL[kind]:
        if name in raw:
            if not isinstance(raw[name], dict):
                raise ConfigError(f"{name}: must be a table")
            blocks[name] = dict(raw[name])

    cfg = ExperimentConfig(kind, list(seeds), output_dir, env, blocks, text, source)
    # build everything once so value errors surface now, not mid-run
    build_environment(cfg)
    if "executor" in blocks:
        exec_config(cfg, seeds[0])
    if "trainer" in blocks:
        train_config(cfg)
    if "primal_dual" in blocks:
        primal_dual_config(cfg, seeds[0])
    if "policy" in blocks:
        _check_types("policy", blocks["policy"], _POLICY_FIELDS)
    if "checks" in blocks:
        _check_types("checks", blocks["checks"], _CHECK_FIELDS)
    if "sweep" in blocks:
        _check_types("sweep", blocks["sweep"], _SWEEP_FIELDS)
        values = blocks["sweep"].get("T0_values")
        if not values or len({int(v) for v in values}) < 2 or any(int(v) < 1 for v in values):
            raise ConfigError("sweep.T0_values: need at least two distinct positive values")
    if "averaging" in blocks:
        _check_types("averaging", blocks["averaging"], _AVERAGING_FIELDS)
    if "oracle" in blocks:
        _check_types("oracle", blocks["oracle"], _ORACLE_FIELDS)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(path))


def _float_list(block: str, key: str, value, shape=None) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{block}.{key}: must be numeric") from None
    if shape is not None and arr.shape != shape:
        raise ConfigError(f"{block}.{key}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{block}.{key}: must be finite")
    return arr


def build_environment(cfg: ExperimentConfig) -> TabularCmdp | ContinuousMonitoringEnv:
    env = cfg.environment
    c = _float_list("environment", "thresholds", env["thresholds"])
    if c.ndim != 1 or c.size == 0:
        raise ConfigError("environment.thresholds: must be a non-empty list")
    try:
        if env["name"] == "monitoring3":
            if c.size != 2:
                raise ConfigError("environment.thresholds: the 3-state monitoring MDP has 2 constraints")
            extra = set(env) - {"name", "thresholds"}
            if extra:
                raise ConfigError(f"environment: field {sorted(extra)[0]!r} does not apply to monitoring3")
            return monitoring_mdp3(c)
        regions = _float_list("environment", "regions", env.get("regions", default_regions().tolist()))
        if regions.ndim != 2 or regions.shape[1] != 4:
            raise ConfigError("environment.regions: expected a list of [x0, y0, x1, y1] rectangles")
        if regions.shape[0] != c.size:
            raise ConfigError(f"environment.thresholds: need one threshold per region ({regions.shape[0]})")
        low = _float_list("environment", "low", env.get("low", [0.0, 0.0]), (2,))
        high = _float_list("environment", "high", env.get("high", [10.0, 10.0]), (2,))
        return ContinuousMonitoringEnv(regions, c, low, high, float(env.get("max_step", 1.0)))
    except EnvError as exc:
        raise ConfigError(f"environment: {exc}") from None


def exec_config(cfg: ExperimentConfig, seed: int, **override) -> ExecConfig:
    data = cfg.block("executor")
    if "seed" in data:
        raise ConfigError("executor: unknown field 'seed' (seeds come from the top-level list)")
    data.update(override)
    data["seed"] = seed
    return _dataclass_block("executor", data, ExecConfig)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    data = cfg.block("trainer")
    return _dataclass_block("trainer", data, TrainConfig, drop=("checkpoint_dir",))


def primal_dual_config(cfg: ExperimentConfig, seed: int, **override) -> PrimalDualConfig:
    data = cfg.block("primal_dual")
    if "seed" in data:
        raise ConfigError("primal_dual: unknown field 'seed' (seeds come from the top-level list)")
    data.update(override)
    data["seed"] = seed
    return _dataclass_block("primal_dual", data, PrimalDualConfig)


def policy_layout(cfg: ExperimentConfig) -> dict:
    out = {"n_spatial": 6, "n_lambda": 3, "sigma": 0.5, "bandwidth_scale": 1.5, "lambda_bandwidth_scale": None}
    out.update(cfg.blocks.get("policy", {}))
    return out
