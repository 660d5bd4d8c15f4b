"""Continual-learning metrics and analytic cost accounting.

Accuracies are stored as fractions in ``[0, 1]``; reports multiply by 100.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .allocation import AllocationConfig, fraction_count
from .exceptions import ConsistencyError, DomainError
from .network import Architecture, NetworkState

# forward pass costs 2 flops per multiply-add, the backward pass twice that
FLOPS_PER_MAC = 6


class AccuracyMatrix:
    """Lower-triangular ``a[j, i]``: accuracy on task ``i`` after training task ``j`` (1-based)."""

    def __init__(self, n_tasks):
        if n_tasks < 1:
            raise DomainError("an accuracy matrix needs at least one task")
        self.values = np.full((n_tasks, n_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows):
        m = cls(len(rows))
        for j, row in enumerate(rows, start=1):
            if len(row) != j:
                raise ConsistencyError(f"row {j} has {len(row)} entries, expected {j}")
            for i, v in enumerate(row, start=1):
                m[j, i] = v
        return m

    @property
    def n_tasks(self):
        return self.values.shape[0]

    @property
    def n_rows(self):
        """Number of rows filled so far (a partial run stops early)."""
        filled = ~np.isnan(self.values).all(axis=1)
        return int(filled.sum())

    def __getitem__(self, key):
        j, i = key
        return float(self.values[j - 1, i - 1])

    def __setitem__(self, key, value):
        j, i = key
        if not 1 <= i <= j <= self.n_tasks:
            raise DomainError(f"cell ({j}, {i}) is outside the lower triangle")
        if not 0.0 <= value <= 1.0:
            raise DomainError(f"accuracy {value} outside [0, 1]")
        self.values[j - 1, i - 1] = value

    def set_row(self, j, row):
        for i, v in enumerate(row, start=1):
            self[j, i] = v

    def row(self, j):
        return self.values[j - 1, :j].copy()

    def diagonal(self):
        return np.diag(self.values).copy()

    def truncated(self, n_rows):
        out = AccuracyMatrix(n_rows)
        out.values = self.values[:n_rows, :n_rows].copy()
        return out

    def filled_cells(self):
        return int((~np.isnan(self.values)).sum())

    def to_rows(self):
        return [self.row(j).tolist() for j in range(1, self.n_rows + 1)]

    def to_csv(self):
        """Rows are after-task indices, columns task ids; empty cells above the diagonal."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task"] + [f"task_{i}" for i in range(1, self.n_tasks + 1)])
        for j in range(1, self.n_tasks + 1):
            cells = ["" if np.isnan(v) else repr(float(v)) for v in self.values[j - 1]]
            w.writerow([j] + cells)
        return buf.getvalue()

    def __eq__(self, other):
        return isinstance(other, AccuracyMatrix) and np.array_equal(self.values, other.values, equal_nan=True)


def _final(matrix):
    T = matrix.n_rows
    if T < 1:
        raise DomainError("no trained task in the matrix")
    return T


def acc(matrix: AccuracyMatrix):
    """Mean accuracy over all tasks after the last one is trained."""
    T = _final(matrix)
    return float(np.mean(matrix.row(T)))


def bwt(matrix: AccuracyMatrix):
    """Backward transfer, or ``None`` when fewer than two tasks were trained."""
    T = _final(matrix)
    if T < 2:
        return None
    last = matrix.row(T)
    diag = matrix.diagonal()
    return float(np.mean(last[: T - 1] - diag[: T - 1]))


def la(matrix: AccuracyMatrix, start_task=1):
    """Mean accuracy of each task right after it was trained, from ``start_task`` on."""
    T = _final(matrix)
    if not 1 <= start_task <= T:
        raise DomainError(f"start task {start_task} outside [1, {T}]")
    return float(np.mean(matrix.diagonal()[start_task - 1 : T]))


def param_count(network: NetworkState):
    """Scalar weights over every task's edges; a conv edge counts its whole kernel."""
    return int(sum(network.present_mask(l).sum() * network.block_size(l) for l in range(1, network.n_layers)))


def layer_param_counts(network: NetworkState):
    return {l: int(network.present_mask(l).sum() * network.block_size(l)) for l in range(1, network.n_layers)}


def dense_param_count(arch: Architecture):
    return int(sum(np.prod(arch.weight_shape(l)) * arch.block_size(l) for l in range(1, arch.n_layers)))


@dataclass
class CostReport:
    params: int
    dense_params: int
    dense_flops: float
    sparse_flops: float
    layer_density: dict = field(default_factory=dict)

    @property
    def params_ratio(self):
        return self.params / self.dense_params if self.dense_params else 0.0

    @property
    def flops_ratio(self):
        return self.sparse_flops / self.dense_flops if self.dense_flops else 0.0

    def to_dict(self):
        return {
            "params": self.params,
            "dense_params": self.dense_params,
            "params_ratio": self.params_ratio,
            "dense_flops": self.dense_flops,
            "sparse_flops": self.sparse_flops,
            "flops_ratio": self.flops_ratio,
            "layer_density": {str(l): d for l, d in self.layer_density.items()},
        }


def flops_estimate(arch: Architecture, densities, epochs, batches, batch_size=1, tasks=1):
    """Training flops of the dense model and of a sparse one with per-layer ``densities``.

    ``densities`` is a scalar or a mapping weight-layer -> fraction of present
    edges.  Dense cost per sample is ``6 * MACs``; the sparse cost of a layer
    scales linearly with its density.
    """
    L = arch.n_layers
    if isinstance(densities, Mapping):
        dens = {l: float(densities[l]) for l in range(1, L)}
    else:
        dens = {l: float(densities) for l in range(1, L)}
    for l, d in dens.items():
        if not 0.0 <= d <= 1.0:
            raise DomainError(f"density {d} of layer {l} outside [0, 1]")
    samples = epochs * batches * batch_size * tasks
    f_d = f_s = 0.0
    params = 0
    for l in range(1, L):
        layer = float(FLOPS_PER_MAC * arch.dense_macs(l) * samples)
        f_d += layer
        f_s += dens[l] * layer
        params += int(round(dens[l] * np.prod(arch.weight_shape(l)))) * arch.block_size(l)
    return CostReport(params, dense_param_count(arch), f_d, f_s, dens)


def network_cost(network: NetworkState, epochs, batches, batch_size=1, tasks=1):
    """:class:`CostReport` of a trained network's final topology."""
    dens = {l: float(network.present_mask(l).mean()) for l in range(1, network.n_layers)}
    rep = flops_estimate(network, dens, epochs, batches, batch_size, tasks)
    rep.params = param_count(network)
    return rep


def planned_param_counts(arch: Architecture, config: AllocationConfig, mode, classes_per_task, n_tasks, reuse_start_task=None):
    """Per-layer scalar weights allocated over a task sequence, computed analytically.

    Each task draws ``round(eps_l * a_l * a_{l+1})`` edges per hidden weight
    layer, with ``a_l`` the allocated neuron count (the full input for layer 1),
    and one set of ``round(eps * a_{L-1})`` edges per class into its output
    unit.  Classes of a task are assumed to pick the same candidate neurons,
    so their hidden edge draws coincide.  In ``afaf`` mode tasks from
    ``reuse_start_task`` on only add edges from ``l_reuse`` up.
    """
    if mode not in ("afaf", "spacenet"):
        raise DomainError(f"unknown allocation mode {mode!r}")
    resolved = config.resolve(arch)
    L = arch.n_layers
    a = {1: arch.widths[0]}
    for l in range(2, L):
        a[l] = fraction_count(resolved.alloc_fraction[l], arch.widths[l - 1])
    start = config.reuse_start_task if reuse_start_task is None else reuse_start_task
    totals = {l: 0 for l in range(1, L)}
    for t in range(1, n_tasks + 1):
        first = config.l_reuse if (mode == "afaf" and t >= start) else 1
        for l in range(first, L):
            if l == L - 1:
                n = classes_per_task * fraction_count(resolved.density[l], a[l])
            else:
                n = fraction_count(resolved.density[l], a[l] * a[l + 1])
            totals[l] += n * arch.block_size(l)
    return totals


def planned_cost(arch, config, mode, classes_per_task, n_tasks, epochs, batches, batch_size=1, reuse_start_task=None):
    counts = planned_param_counts(arch, config, mode, classes_per_task, n_tasks, reuse_start_task)
    dens = {l: counts[l] / (np.prod(arch.weight_shape(l)) * arch.block_size(l)) for l in counts}
    rep = flops_estimate(arch, dens, epochs, batches, batch_size, n_tasks)
    rep.params = int(sum(counts.values()))
    return rep


METRIC_COLUMNS = ["method", "benchmark", "seed", "ACC", "BWT", "LA", "params", "flops_ratio"]


def metrics_row(method, benchmark, seed, matrix, la_start=1, cost: CostReport | None = None):
    b = bwt(matrix)
    return {
        "method": method,
        "benchmark": benchmark,
        "seed": seed,
        "ACC": 100 * acc(matrix),
        "BWT": "" if b is None else 100 * b,
        "LA": 100 * la(matrix, min(la_start, matrix.n_rows)),
        "params": "" if cost is None else cost.params,
        "flops_ratio": "" if cost is None else cost.flops_ratio,
    }


def write_metrics_csv(rows, path_or_buf):
    """Write metric rows with the fixed column set; returns the text written."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in METRIC_COLUMNS})
    text = buf.getvalue()
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    elif path_or_buf is not None:
        with open(path_or_buf, "w", newline="") as f:
            f.write(text)
    return text
