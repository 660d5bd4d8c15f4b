"""Scikit-learn style front end: one ``partial_fit`` call per task."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .allocation import (
    STRATEGIES,
    AllocationConfig,
    NeuronLedger,
    allocate_spacenet_style,
    apply_plan,
    average_class_activation,
    build_allocation,
    enforce_ambiguity_constraints,
)
from .dst import TrainConfig, fix_neurons_after_task, train_task
from .exceptions import ConfigError, ConsistencyError, DomainError, InputShapeError, LabelDomainError
from .models import mlp_layers
from .network import LayerSpec, NetworkState, forward

MODES = ("afaf", "spacenet")

# independent random streams per (seed, task, purpose)
STREAM_ALLOC, STREAM_INIT, STREAM_TRAIN = 0, 1, 2


@dataclass(frozen=True)
class MethodSpec:
    """Allocation mode, candidate strategy and ablation switches."""

    mode: str = "afaf"
    strategy: str = "highest"
    without_orthogonal_output: bool = False
    candidates_in_last_layer: bool = False
    reuse_all: bool = False

    def validate(self):
        errors = []
        if self.mode not in MODES:
            errors.append(("mode", f"must be one of {MODES}"))
        if self.strategy not in STRATEGIES:
            errors.append(("strategy", f"must be one of {STRATEGIES}"))
        flags = (self.without_orthogonal_output, self.candidates_in_last_layer, self.reuse_all)
        if self.mode != "afaf" and any(flags):
            errors.append(("mode", "ablation flags require mode 'afaf'"))
        if errors:
            raise ConfigError(errors)
        return self

    @property
    def label(self):
        if self.mode == "spacenet":
            return "spacenet"
        parts = ["afaf"]
        if self.strategy != "highest":
            parts.append(self.strategy)
        if self.without_orthogonal_output:
            parts.append("wo-orth")
        if self.candidates_in_last_layer:
            parts.append("w-R_L-1")
        if self.reuse_all:
            parts.append("reuse-all")
        return "/".join(parts)

    def to_dict(self):
        return asdict(self)


def task_rng(seed, task, purpose):
    return np.random.default_rng([int(seed), int(task), int(purpose)])


class SparseContinualClassifier(ClassifierMixin, BaseEstimator):
    """Fixed-capacity sparse network trained one task at a time.

    Each :meth:`partial_fit` call is a new task made of the classes present
    in ``y``; earlier data is never revisited.  ``predict`` uses a single
    classifier over every class seen so far, or only the classes of one task
    when ``task`` is given.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Dense hidden layers; ignored when ``layers`` is given.
    layers : list of LayerSpec or dict, optional
        Full layer stack ending in the classifier layer.
    input_shape : tuple, optional
        Needed with ``layers``; inferred from the data otherwise.
    max_classes : int
        Output capacity of the classifier layer.
    """

    def __init__(
        self,
        hidden_layer_sizes=(100, 100, 100),
        layers=None,
        input_shape=None,
        max_classes=10,
        mode="afaf",
        strategy="highest",
        without_orthogonal_output=False,
        candidates_in_last_layer=False,
        reuse_all=False,
        l_reuse=2,
        density=None,
        alloc_fraction=None,
        candidate_fraction=0.3,
        fix_fraction=None,
        reuse_start_task=1,
        epochs=40,
        batch_size=64,
        learning_rate=0.1,
        zeta=0.3,
        cycle_period=1,
        loss_scope="task",
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.layers = layers
        self.input_shape = input_shape
        self.max_classes = max_classes
        self.mode = mode
        self.strategy = strategy
        self.without_orthogonal_output = without_orthogonal_output
        self.candidates_in_last_layer = candidates_in_last_layer
        self.reuse_all = reuse_all
        self.l_reuse = l_reuse
        self.density = density
        self.alloc_fraction = alloc_fraction
        self.candidate_fraction = candidate_fraction
        self.fix_fraction = fix_fraction
        self.reuse_start_task = reuse_start_task
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.zeta = zeta
        self.cycle_period = cycle_period
        self.loss_scope = loss_scope
        self.random_state = random_state

    @classmethod
    def from_configs(cls, method: MethodSpec, alloc: AllocationConfig, train: TrainConfig, **kwargs):
        return cls(
            mode=method.mode,
            strategy=method.strategy,
            without_orthogonal_output=method.without_orthogonal_output,
            candidates_in_last_layer=method.candidates_in_last_layer,
            reuse_all=method.reuse_all,
            l_reuse=alloc.l_reuse,
            density=alloc.density,
            alloc_fraction=alloc.alloc_fraction,
            candidate_fraction=alloc.candidate_fraction,
            fix_fraction=alloc.fix_fraction,
            reuse_start_task=alloc.reuse_start_task,
            epochs=train.epochs,
            batch_size=train.batch_size,
            learning_rate=train.learning_rate,
            zeta=train.zeta,
            cycle_period=train.cycle_period,
            loss_scope=train.loss_scope,
            random_state=train.seed,
            **kwargs,
        )

    # -- configuration ------------------------------------------------------

    def method_spec(self):
        return MethodSpec(
            self.mode, self.strategy, self.without_orthogonal_output, self.candidates_in_last_layer, self.reuse_all
        ).validate()

    def alloc_config(self):
        cfg = AllocationConfig(
            l_reuse=self.l_reuse,
            candidate_fraction=self.candidate_fraction,
            candidate_strategy=self.strategy,
            reuse_start_task=self.reuse_start_task,
        )
        for name in ("density", "alloc_fraction", "fix_fraction"):
            v = getattr(self, name)
            if v is not None:
                setattr(cfg, name, v)
        return cfg

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            zeta=self.zeta,
            cycle_period=self.cycle_period,
            loss_scope=self.loss_scope,
            seed=self.random_state,
        ).validate()

    def _build_network(self, sample_shape):
        shape = tuple(self.input_shape) if self.input_shape is not None else tuple(sample_shape)
        if self.layers is not None:
            layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in self.layers]
        else:
            layers = mlp_layers(self.hidden_layer_sizes, self.max_classes)
        net = NetworkState(shape, layers)
        if net.output_capacity != self.max_classes:
            raise ConfigError([("max_classes", f"classifier layer has {net.output_capacity} units")])
        cfg = self.alloc_config()
        if self.mode == "afaf" and not self.reuse_all:
            cfg.validate(net)
        else:
            cfg.validate()
            cfg.resolve(net)
        return net

    # -- validation ---------------------------------------------------------

    def _validate_x(self, X, reset=False):
        X = check_array(X, dtype=np.float64, allow_nd=True, ensure_all_finite=True)
        if not reset:
            if X.shape[1:] != self.network_.input_shape:
                raise InputShapeError(f"expected samples of shape {self.network_.input_shape}, got {X.shape[1:]}")
        return X

    # -- training -----------------------------------------------------------

    def _reset(self, sample_shape):
        self.network_ = self._build_network(sample_shape)
        self.ledger_ = NeuronLedger.for_network(self.network_)
        self.plans_ = []
        self.logs_ = []
        self.task_classes_ = []
        self.n_features_in_ = int(np.prod(sample_shape))

    def partial_fit(self, X, y, classes=None):
        """Train one new task on ``(X, y)``; its classes must be unseen.

        ``classes`` fixes the task's class order; defaults to sorted labels.
        The estimator is left unchanged when allocation or training fails.
        """
        method = self.method_spec()
        first = not hasattr(self, "network_")
        X = check_array(X, dtype=np.float64, allow_nd=True, ensure_all_finite=True)
        y = column_or_1d(y, warn=False)
        if len(X) != len(y):
            raise ConsistencyError(f"X has {len(X)} samples, y has {len(y)}")
        if len(X) == 0:
            raise ConsistencyError("empty task")
        if first:
            self._reset(X.shape[1:])
        elif X.shape[1:] != self.network_.input_shape:
            raise InputShapeError(f"expected samples of shape {self.network_.input_shape}, got {X.shape[1:]}")
        task_classes = list(classes) if classes is not None else sorted(np.unique(y).tolist())
        if set(np.unique(y).tolist()) - set(task_classes):
            raise LabelDomainError("y contains labels outside `classes`")
        seen = set(self.network_.output_map)
        if seen & set(task_classes):
            raise LabelDomainError(f"classes {sorted(seen & set(task_classes))} were trained in an earlier task")

        net = self.network_.copy()
        led = self.ledger_.copy()
        task = len(self.task_classes_)
        seed = self.random_state
        cfg = self.alloc_config()
        cfg.candidate_strategy = method.strategy
        units = net.assign_output_units(task_classes)
        rng_alloc = task_rng(seed, task, STREAM_ALLOC)
        fix_last = not method.without_orthogonal_output
        if method.mode == "spacenet" or task + 1 < cfg.reuse_start_task or task == 0:
            plan = allocate_spacenet_style(net, led, cfg, task, task_classes, units, rng_alloc, fix_last_hidden=fix_last)
        else:
            data = {c: X[y == c] for c in task_classes}
            plan = build_allocation(
                net, led, cfg, data, task, units, rng_alloc,
                candidates_in_last_layer=method.candidates_in_last_layer,
                reuse_all=method.reuse_all,
                fix_last_hidden=fix_last,
            )
        enforce_ambiguity_constraints(plan, led)
        apply_plan(net, led, plan, task_rng(seed, task, STREAM_INIT))
        _, log, report = train_task(net, plan, led, X, y, self.train_config(), task_rng(seed, task, STREAM_TRAIN))
        fix_neurons_after_task(led, report, plan, cfg.resolve(net).fix_fraction)

        self.network_, self.ledger_ = net, led
        self.plans_.append(plan)
        self.logs_.append(log)
        self.task_classes_.append(task_classes)
        return self

    def fit(self, X, y, tasks=None):
        """Train from scratch on a task sequence.

        ``tasks`` lists the classes of each task in order; by default all
        classes form one task.
        """
        for attr in ("network_", "ledger_", "plans_", "logs_", "task_classes_"):
            if hasattr(self, attr):
                delattr(self, attr)
        y = column_or_1d(y, warn=False)
        if tasks is None:
            tasks = [sorted(np.unique(y).tolist())]
        for classes in tasks:
            sel = np.isin(y, classes)
            self.partial_fit(np.asarray(X)[sel], y[sel], classes=classes)
        return self

    # -- inference ----------------------------------------------------------

    @property
    def classes_(self):
        check_is_fitted(self, "network_")
        return self.network_.unit_classes

    @property
    def n_tasks_(self):
        check_is_fitted(self, "network_")
        return len(self.task_classes_)

    def decision_function(self, X, batch_size=512):
        check_is_fitted(self, "network_")
        X = self._validate_x(X)
        out = [forward(self.network_, X[i : i + batch_size])[0] for i in range(0, len(X), batch_size)]
        return np.vstack(out) if out else np.zeros((0, self.network_.n_outputs))

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X, task=None):
        """Class-incremental prediction, or restricted to task ``task`` (0-based) if given."""
        z = self.decision_function(X)
        classes = self.classes_
        if task is None:
            return classes[np.argmax(z, axis=1)]
        if not 0 <= task < len(self.task_classes_):
            raise DomainError(f"unknown task {task}; {len(self.task_classes_)} tasks trained")
        units = self.network_.output_units(self.task_classes_[task])
        return classes[units[np.argmax(z[:, units], axis=1)]]

    def score(self, X, y, sample_weight=None, task=None):
        y = column_or_1d(y, warn=False)
        pred = self.predict(X, task=task)
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        return float(np.average(pred == y, weights=w)) if len(y) else 0.0

    def transform(self, X, layer=None):
        """Activations of neuron layer ``layer`` (default: last hidden layer)."""
        check_is_fitted(self, "network_")
        X = self._validate_x(X)
        layer = self.network_.n_layers - 1 if layer is None else layer
        _, tr = forward(self.network_, X, trace=True)
        return tr[layer]

    def class_activations(self, X, y, layer, classes=None):
        """Average activation of ``layer`` per class, one row per class."""
        check_is_fitted(self, "network_")
        X = self._validate_x(X)
        y = column_or_1d(y, warn=False)
        classes = sorted(np.unique(y).tolist()) if classes is None else list(classes)
        return np.vstack([average_class_activation(self.network_, X[y == c])[layer - 1] for c in classes])
