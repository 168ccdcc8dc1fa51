"""Run configuration for the benchmark harness.

A run file is YAML with a small fixed schema: top-level identity keys, a
`common` section, and optional `desk` / `paper` sections that override it.
Desk scale is the default; paper scale is opt-in. Every run directory gets a
fully resolved snapshot that can be loaded back and re-executed bit-for-bit.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from .baselines import DirectSdeConfig
from .forces import ClassifierSpec, EstimatorSpec
from .solver import SolverConfig
from .tasks import TASK_IDS, make_task

SCHEMA_VERSION = 1
METHODS = ("fbsde-terminal", "fbsde-marginal", "direct-sde", "linear")

_TOP_KEYS = {"schema", "name", "task", "method", "seeds", "common", "desk", "paper"}
_SECTION_KEYS = {"solver", "direct", "eval"}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


@dataclass(frozen=True)
class EvalSpec:
    samples: int = 2000
    target_draws: int = 3
    rollouts: int = 3

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("samples must be >= 2")
        if self.target_draws < 1:
            raise ValueError("target_draws must be >= 1")
        if self.rollouts < 1:
            raise ValueError("rollouts must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    name: str
    task: str
    method: str
    seeds: tuple[int, ...]
    eval: EvalSpec
    solver: SolverConfig | None = None
    direct: DirectSdeConfig | None = None
    paper_scale: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: {self.method!r} is not one of {METHODS}")
        if self.task not in TASK_IDS:
            raise ConfigError(f"task: {self.task!r} is not one of {TASK_IDS}")
        if not self.seeds:
            raise ConfigError("seeds: must be a non-empty list of integers")
        if any(not isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds: must be a non-empty list of integers")
        if self.method.startswith("fbsde"):
            if self.solver is None:
                raise ConfigError(f"solver: required for method {self.method}")
            if self.method == "fbsde-terminal" and self.solver.lam_f != 0.0:
                raise ConfigError("solver.lam_f: fbsde-terminal requires lam_f = 0")
            if self.method == "fbsde-marginal" and self.solver.lam_f <= 0.0:
                raise ConfigError("solver.lam_f: fbsde-marginal requires lam_f > 0")
        if self.method == "direct-sde" and self.direct is None:
            raise ConfigError(f"direct: required for method {self.method}")


_NESTED = {
    "classifier": ClassifierSpec,
    "estimator": EstimatorSpec,
}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
        if key in _NESTED and isinstance(value, dict):
            value = _build(_NESTED[key], value, f"{path}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _check_section(section: dict, path: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected a mapping")
    for key in section:
        if key not in _SECTION_KEYS:
            raise ConfigError(f"{path}.{key}: unknown key")


def build_run_config(doc: dict, *, name: str, paper_scale: bool = False,
                     seed_override: list[int] | None = None) -> RunConfig:
    for key in doc:
        if key not in _TOP_KEYS:
            raise ConfigError(f"{key}: unknown key")
    schema = doc.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"schema: version {schema} not supported (expected {SCHEMA_VERSION})")
    task = doc.get("task")
    if task is None:
        raise ConfigError("task: required")
    method = doc.get("method")
    if method is None:
        raise ConfigError("method: required")
    seeds = seed_override if seed_override is not None else doc.get("seeds")
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds: must be a non-empty list of integers")

    common = doc.get("common", {})
    _check_section(common, "common")
    scale_key = "paper" if paper_scale else "desk"
    scale = doc.get(scale_key, {})
    _check_section(scale, scale_key)
    merged = _deep_merge(common, scale)

    solver = None
    direct = None
    if method in ("fbsde-terminal", "fbsde-marginal"):
        solver = _build(SolverConfig, merged.get("solver", {}), "solver")
    elif method == "direct-sde":
        direct = _build(DirectSdeConfig, merged.get("direct", {}), "direct")
    eval_spec = _build(EvalSpec, merged.get("eval", {}), "eval")

    return RunConfig(
        name=str(doc.get("name", name)),
        task=str(task),
        method=str(method),
        seeds=tuple(int(s) for s in seeds),
        eval=eval_spec,
        solver=solver,
        direct=direct,
        paper_scale=paper_scale,
    )


def load_run_config(path, *, paper_scale: bool = False,
                    seed_override: list[int] | None = None) -> RunConfig:
    path = Path(path)
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return build_run_config(doc, name=path.stem, paper_scale=paper_scale,
                            seed_override=seed_override)


def snapshot_dict(cfg: RunConfig) -> dict:
    """Fully resolved, scale-applied run description for the run directory."""
    task = make_task(cfg.task)
    snap = {
        "schema": SCHEMA_VERSION,
        "name": cfg.name,
        "task": cfg.task,
        "task_geometry": dataclasses.asdict(task),
        "method": cfg.method,
        "seeds": list(cfg.seeds),
        "paper_scale": cfg.paper_scale,
        "eval": dataclasses.asdict(cfg.eval),
    }
    if cfg.solver is not None:
        snap["solver"] = dataclasses.asdict(cfg.solver)
    if cfg.direct is not None:
        snap["direct"] = dataclasses.asdict(cfg.direct)
    return snap


def run_config_from_snapshot(snap: dict) -> RunConfig:
    solver = _build(SolverConfig, snap["solver"], "solver") if "solver" in snap else None
    direct = _build(DirectSdeConfig, snap["direct"], "direct") if "direct" in snap else None
    return RunConfig(
        name=snap["name"],
        task=snap["task"],
        method=snap["method"],
        seeds=tuple(int(s) for s in snap["seeds"]),
        eval=_build(EvalSpec, snap.get("eval", {}), "eval"),
        solver=solver,
        direct=direct,
        paper_scale=bool(snap.get("paper_scale", False)),
    )
