"""Experiment configuration files (YAML, schema-versioned, strict keys)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .allocation import AllocationConfig
from .data import BENCHMARKS
from .dst import TrainConfig
from .estimator import MethodSpec
from .exceptions import ConfigError
from .network import Architecture
from .runner import ModelSpec

SCHEMA_VERSION = 1

TOP_KEYS = {"schema_version", "benchmark", "methods", "model", "allocation", "training", "seeds", "output", "snapshots"}
BENCHMARK_KEYS = {"name", "roots", "max_per_class", "data_seed", "reuse_start_task", "synthetic"}
SYNTHETIC_KEYS = {"num_tasks", "classes_per_task", "dim", "separation", "samples", "similarity", "period", "test_samples"}
METHOD_KEYS = {"mode", "strategy", "without_orthogonal_output", "candidates_in_last_layer", "reuse_all"}
MODEL_KEYS = {"kind", "hidden", "dropout"}
ALLOC_KEYS = {"l_reuse", "density", "alloc_fraction", "candidate_fraction", "fix_fraction"}
TRAIN_KEYS = {"epochs", "batch_size", "learning_rate", "zeta", "cycle_period", "loss_scope"}


@dataclass
class BenchmarkConfig:
    name: str
    roots: dict = field(default_factory=dict)
    max_per_class: int | None = None
    data_seed: int = 0
    reuse_start_task: int | None = None
    synthetic: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "name": self.name,
            "roots": dict(self.roots),
            "max_per_class": self.max_per_class,
            "data_seed": self.data_seed,
            "reuse_start_task": self.reuse_start_task,
            "synthetic": dict(self.synthetic),
        }


@dataclass
class ExperimentConfig:
    benchmark: BenchmarkConfig
    methods: list
    model: ModelSpec
    allocation: AllocationConfig
    training: TrainConfig
    seeds: list = field(default_factory=lambda: [0])
    output: str = "runs"
    snapshots: bool = True

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "benchmark": self.benchmark.to_dict(),
            "methods": [m.to_dict() for m in self.methods],
            "model": self.model.to_dict(),
            "allocation": {k: v for k, v in self.allocation.to_dict().items() if k in ALLOC_KEYS},
            "training": {k: v for k, v in self.training.to_dict().items() if k in TRAIN_KEYS},
            "seeds": list(self.seeds),
            "output": self.output,
            "snapshots": self.snapshots,
        }

    def benchmark_shape(self):
        """``(input_shape, n_classes, reuse_start_task)`` without loading any data."""
        b = self.benchmark
        if b.name == "synthetic":
            syn = {"num_tasks": 5, "classes_per_task": 2, "dim": 20, **b.synthetic}
            shape, n_classes = (syn["dim"],), syn["num_tasks"] * syn["classes_per_task"]
            reuse = min(2, syn["num_tasks"])
        else:
            spec = BENCHMARKS[b.name]()
            shape, n_classes, reuse = spec.input_shape, spec.n_classes, spec.reuse_start_task
        return shape, n_classes, (b.reuse_start_task or reuse)

    def validate(self):
        """Check every knob against the modules' preconditions; raises :class:`ConfigError`."""
        errors = []
        b = self.benchmark
        if b.name != "synthetic" and b.name not in BENCHMARKS:
            errors.append(("benchmark.name", f"unknown benchmark; choose from {sorted(BENCHMARKS) + ['synthetic']}"))
        if b.max_per_class is not None and b.max_per_class < 1:
            errors.append(("benchmark.max_per_class", "must be >= 1"))
        if not self.methods:
            errors.append(("methods", "at least one method is required"))
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            errors.append(("seeds", "must be a non-empty list of distinct integers"))
        for i, m in enumerate(self.methods):
            try:
                m.validate()
            except ConfigError as e:
                errors += [(f"methods[{i}].{f}", msg) for f, msg in e.errors]
        for part in (self.model, self.training):
            try:
                part.validate()
            except ConfigError as e:
                errors += [(f if "." in f else f"training.{f}", msg) for f, msg in e.errors]
        if errors:
            raise ConfigError(errors)
        shape, n_classes, reuse = self.benchmark_shape()
        if reuse < 1:
            errors.append(("benchmark.reuse_start_task", "must be >= 1"))
        try:
            arch = Architecture(shape, self.model.layers(n_classes))
        except ValueError as e:
            raise ConfigError([("model", str(e))]) from None
        needs_l_reuse = any(m.mode == "afaf" and not m.reuse_all for m in self.methods)
        try:
            self.allocation.validate(arch if needs_l_reuse else None)
            self.allocation.resolve(arch)
        except ConfigError as e:
            errors += [(f"allocation.{f}", msg) for f, msg in e.errors]
        if errors:
            raise ConfigError(errors)
        return self


def _check_keys(section, allowed, where, errors):
    if not isinstance(section, dict):
        errors.append((where, "must be a mapping"))
        return {}
    for k in section:
        if k not in allowed:
            errors.append((f"{where}.{k}" if where else k, "unknown key"))
    return section


def config_from_dict(d):
    """Build and validate an :class:`ExperimentConfig` from parsed YAML."""
    errors = []
    d = _check_keys(d, TOP_KEYS, "", errors)
    if d.get("schema_version") != SCHEMA_VERSION:
        errors.append(("schema_version", f"must be {SCHEMA_VERSION}"))
    if "benchmark" not in d:
        errors.append(("benchmark", "is required"))
    bench = _check_keys(d.get("benchmark", {}), BENCHMARK_KEYS, "benchmark", errors)
    _check_keys(bench.get("synthetic", {}), SYNTHETIC_KEYS, "benchmark.synthetic", errors)
    methods = d.get("methods", [{}])
    if not isinstance(methods, list):
        errors.append(("methods", "must be a list"))
        methods = []
    for i, m in enumerate(methods):
        _check_keys(m, METHOD_KEYS, f"methods[{i}]", errors)
    model = _check_keys(d.get("model", {}), MODEL_KEYS, "model", errors)
    alloc = _check_keys(d.get("allocation", {}), ALLOC_KEYS, "allocation", errors)
    train = _check_keys(d.get("training", {}), TRAIN_KEYS, "training", errors)
    if errors:
        raise ConfigError(errors)
    if "name" not in bench:
        raise ConfigError([("benchmark.name", "is required")])
    try:
        cfg = ExperimentConfig(
            benchmark=BenchmarkConfig(**bench),
            methods=[MethodSpec(**m) for m in methods],
            model=ModelSpec(**{k: tuple(v) if k == "hidden" else v for k, v in model.items()}),
            allocation=AllocationConfig(**alloc),
            training=TrainConfig(**train),
            seeds=[int(s) for s in d.get("seeds", [0])],
            output=str(d.get("output", "runs")),
            snapshots=bool(d.get("snapshots", True)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError([("config", str(e))]) from None
    return cfg.validate()


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError([("config", f"{path} does not exist")])
    try:
        d = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError([("config", f"YAML parse error: {e}")]) from None
    return config_from_dict(d if d is not None else {})
