"""Run a task sequence end to end and record the accuracy matrices."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .allocation import AllocationConfig
from .data import TaskSequence
from .dst import TrainConfig
from .estimator import MethodSpec, SparseContinualClassifier
from .exceptions import CapacityExhaustedError, ConfigError, DomainError
from .metrics import AccuracyMatrix, CostReport, acc, bwt, dense_param_count, flops_estimate, la, param_count
from .models import alexnet_like_layers, mlp_layers
from .network import LayerSpec, forward
from .snapshot import save_network

MODEL_KINDS = ("mlp", "alexnet")


@dataclass
class ModelSpec:
    kind: str = "mlp"
    hidden: tuple = (400, 400, 400)
    dropout: float = 0.0

    def validate(self):
        errors = []
        if self.kind not in MODEL_KINDS:
            errors.append(("model.kind", f"must be one of {MODEL_KINDS}"))
        if self.kind == "mlp" and (not self.hidden or any(int(h) < 1 for h in self.hidden)):
            errors.append(("model.hidden", "needs at least one positive layer width"))
        if not 0.0 <= self.dropout < 1.0:
            errors.append(("model.dropout", "must lie in [0, 1)"))
        if errors:
            raise ConfigError(errors)
        return self

    def layers(self, n_outputs):
        if self.kind == "alexnet":
            return alexnet_like_layers(n_outputs, self.dropout)
        return mlp_layers([int(h) for h in self.hidden], n_outputs, self.dropout)

    def to_dict(self):
        return {"kind": self.kind, "hidden": [int(h) for h in self.hidden], "dropout": self.dropout}


def _accuracy(pred, y):
    return float(np.mean(pred == y)) if len(y) else 0.0


def _logits(network, x, batch_size=512):
    out = [forward(network, x[i : i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.vstack(out) if out else np.zeros((0, network.n_outputs))


def evaluate_class_il(network, test_sets):
    """Accuracy per ``(x, y)`` test set with the argmax over every seen output unit."""
    classes = network.unit_classes
    return [_accuracy(classes[np.argmax(_logits(network, x), axis=1)], y) for x, y in test_sets]


def evaluate_task_il(network, test_sets, task_classes, task_labels):
    """Accuracy per test set with the argmax restricted to its task's units.

    ``task_classes[t]`` lists the classes of task ``t``; ``task_labels[k]``
    names the task of ``test_sets[k]``.
    """
    classes = network.unit_classes
    row = []
    for (x, y), t in zip(test_sets, task_labels):
        if not 0 <= t < len(task_classes):
            raise DomainError(f"unknown task label {t}")
        units = network.output_units(task_classes[t])
        z = _logits(network, x)[:, units]
        row.append(_accuracy(classes[units[np.argmax(z, axis=1)]], y))
    return row


def argmax_restriction_holds(network, x, y, units):
    """Samples whose class-IL argmax falls in ``units`` keep their prediction under task-IL."""
    z = _logits(network, x)
    full = np.argmax(z, axis=1)
    inside = np.isin(full, units)
    restricted = units[np.argmax(z[:, units], axis=1)]
    return bool(np.all(full[inside] == restricted[inside]))


@dataclass
class RunRecord:
    method: MethodSpec
    benchmark: str
    seed: int
    class_il: AccuracyMatrix
    task_il: AccuracyMatrix
    cost: CostReport | None = None
    alloc_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    reuse_start_task: int = 1
    task_classes: list = field(default_factory=list)
    training: list = field(default_factory=list)
    failure: dict | None = None
    snapshot: str | None = None
    data: dict = field(default_factory=dict)
    wall_time: float = 0.0
    estimator: object = field(default=None, repr=False, compare=False)

    @property
    def n_completed(self):
        return self.class_il.n_rows

    @property
    def la_entries(self):
        return [float(v) for v in self.class_il.diagonal()[: self.n_completed]]

    def metrics(self, scenario="class_il"):
        m = self.class_il if scenario == "class_il" else self.task_il
        if m.n_rows == 0:
            return {"ACC": None, "BWT": None, "LA": None}
        t = m.truncated(m.n_rows)
        return {"ACC": acc(t), "BWT": bwt(t), "LA": la(t, min(self.reuse_start_task, t.n_rows))}

    def to_dict(self):
        return {
            "method": {**self.method.to_dict(), "label": self.method.label},
            "benchmark": self.benchmark,
            "seed": int(self.seed),
            "class_il": self.class_il.to_rows(),
            "task_il": self.task_il.to_rows(),
            "la_entries": self.la_entries,
            "metrics": {"class_il": self.metrics("class_il"), "task_il": self.metrics("task_il")},
            "cost": None if self.cost is None else self.cost.to_dict(),
            "alloc_config": self.alloc_config,
            "train_config": self.train_config,
            "model": self.model,
            "reuse_start_task": self.reuse_start_task,
            "task_classes": self.task_classes,
            "training": self.training,
            "failure": self.failure,
            "snapshot": self.snapshot,
            "data": self.data,
            "wall_time": self.wall_time,
        }

    def to_json(self, include_wall_time=True):
        d = self.to_dict()
        if not include_wall_time:
            d.pop("wall_time")
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        n = len(d["task_classes"]) or 1
        return cls(
            method=MethodSpec(**{k: v for k, v in d["method"].items() if k != "label"}),
            benchmark=d["benchmark"],
            seed=d["seed"],
            class_il=_matrix(d["class_il"], n),
            task_il=_matrix(d["task_il"], n),
            cost=None if d["cost"] is None else _cost(d["cost"]),
            alloc_config=d["alloc_config"],
            train_config=d["train_config"],
            model=d.get("model", {}),
            reuse_start_task=d["reuse_start_task"],
            task_classes=d["task_classes"],
            training=d.get("training", []),
            failure=d.get("failure"),
            snapshot=d.get("snapshot"),
            data=d.get("data", {}),
            wall_time=d.get("wall_time", 0.0),
        )

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path, matrix_csv=True):
        path = Path(path)
        path.write_text(self.to_json())
        if matrix_csv:
            path.with_suffix(".class_il.csv").write_text(self.class_il.to_csv())
            path.with_suffix(".task_il.csv").write_text(self.task_il.to_csv())
        return path


def _matrix(rows, n):
    m = AccuracyMatrix(n)
    for j, row in enumerate(rows, start=1):
        m.set_row(j, row)
    return m


def _cost(d):
    return CostReport(
        d["params"], d["dense_params"], d["dense_flops"], d["sparse_flops"],
        {int(k): v for k, v in d["layer_density"].items()},
    )


def _task_flops(network, n_train, config: TrainConfig):
    dens = {l: float(network.present_mask(l).mean()) for l in range(1, network.n_layers)}
    batches = -(-n_train // config.batch_size)
    return flops_estimate(network, dens, config.epochs, batches, config.batch_size)


def run_sequence(
    benchmark: TaskSequence,
    method: MethodSpec,
    alloc_config: AllocationConfig,
    train_config: TrainConfig,
    seed: int,
    model: ModelSpec | None = None,
    snapshot_path=None,
    log_file=None,
):
    """Train every task of ``benchmark`` in order and evaluate after each one.

    The estimator receives only the current task's training data.  A
    :class:`CapacityExhaustedError` stops the run and returns the rows filled
    so far with a failure marker naming the task.
    """
    start = time.perf_counter()
    if len(benchmark) == 0:
        raise ConfigError([("benchmark", "has no tasks")])
    method.validate()
    alloc_config = AllocationConfig(**alloc_config.to_dict())
    alloc_config.reuse_start_task = benchmark.spec.reuse_start_task
    alloc_config.candidate_strategy = method.strategy
    train_config = TrainConfig(**{**train_config.to_dict(), "seed": int(seed)})
    train_config.validate()
    model = (model or ModelSpec()).validate()
    n_classes = sum(len(t.classes) for t in benchmark)
    layers = model.layers(n_classes)
    clf = SparseContinualClassifier.from_configs(
        method, alloc_config, train_config, layers=layers, input_shape=tuple(benchmark[0].x_train.shape[1:]),
        max_classes=n_classes,
    )
    T = len(benchmark)
    record = RunRecord(
        method=method,
        benchmark=benchmark.spec.name,
        seed=int(seed),
        class_il=AccuracyMatrix(T),
        task_il=AccuracyMatrix(T),
        alloc_config=alloc_config.to_dict(),
        train_config=train_config.to_dict(),
        model=model.to_dict(),
        reuse_start_task=alloc_config.reuse_start_task,
        task_classes=[[int(c) for c in t.classes] for t in benchmark],
    )
    dense_flops = sparse_flops = 0.0
    for t, task in enumerate(benchmark):
        try:
            clf.partial_fit(task.x_train, task.y_train, classes=task.classes)
        except CapacityExhaustedError as e:
            record.failure = {
                "task": t + 1,
                "error": "capacity_exhausted",
                "layer": e.layer,
                "requested": e.requested,
                "available": e.available,
            }
            break
        net = clf.network_
        log = clf.logs_[-1]
        if log_file is not None:
            for entry in log:
                log_file.write(json.dumps(entry) + "\n")
        record.training.append({
            "task": t + 1,
            "final_loss": log[-1]["loss"],
            "final_train_acc": log[-1]["train_acc"],
            "shortfall_cycles": sum(e["shortfall"] for e in log),
            "mode": clf.plans_[-1].mode,
        })
        rep = _task_flops(net, len(task.x_train), train_config)
        dense_flops += rep.dense_flops
        sparse_flops += rep.sparse_flops
        seen = benchmark.tasks[: t + 1]
        sets = [(s.x_test, s.y_test) for s in seen]
        record.class_il.set_row(t + 1, evaluate_class_il(net, sets))
        record.task_il.set_row(t + 1, evaluate_task_il(net, sets, clf.task_classes_, list(range(t + 1))))
    if clf.plans_:
        net = clf.network_
        record.cost = CostReport(
            param_count(net),
            dense_param_count(net),
            dense_flops,
            sparse_flops,
            {l: float(net.present_mask(l).mean()) for l in range(1, net.n_layers)},
        )
        if snapshot_path is not None:
            save_network(snapshot_path, net, clf.ledger_)
            record.snapshot = str(snapshot_path)
    record.wall_time = time.perf_counter() - start
    record.estimator = clf
    return record
