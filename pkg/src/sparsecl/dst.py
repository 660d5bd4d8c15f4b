"""Masked SGD with drop-and-grow rewiring for one task's sub-network."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .allocation import AllocationPlan, NeuronLedger, fraction_count
from .exceptions import ConfigError, ConsistencyError, DivergenceError, NumericStateError, StalenessError
from .network import NO_EDGE, NetworkState, SparseEdgeSet, loss_and_gradients, sgd_step


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 0.1
    zeta: float = 0.3
    cycle_period: int = 1
    loss_scope: str = "task"
    seed: int = 0

    def validate(self):
        errors = []
        if self.epochs < 1:
            errors.append(("epochs", "must be >= 1"))
        if self.batch_size < 1:
            errors.append(("batch_size", "must be >= 1"))
        if not self.learning_rate > 0:
            errors.append(("learning_rate", "must be > 0"))
        if not 0.0 <= self.zeta < 1.0:
            errors.append(("zeta", "must lie in [0, 1)"))
        if self.cycle_period < 1:
            errors.append(("cycle_period", "must be >= 1"))
        if self.loss_scope not in ("task", "seen"):
            errors.append(("loss_scope", "must be 'task' or 'seen'"))
        if errors:
            raise ConfigError(errors)
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class ImportanceReport:
    """``edge[l]`` is an ``(n_out, n_in)`` score map of ``W_l``; ``neuron[l]`` per neuron layer."""

    edge: dict = field(default_factory=dict)
    neuron: dict = field(default_factory=dict)


class GradientAccumulator:
    """Running sum of per-edge absolute gradients over a window of steps."""

    def __init__(self, network: NetworkState):
        self.shapes = [o.shape for o in network.owner]
        self.reset()

    def reset(self):
        self.sums = [np.zeros(s) for s in self.shapes]
        self.steps = 0

    def add(self, gradients):
        for acc, g in zip(self.sums, gradients):
            if g is None:
                continue
            a = np.abs(g)
            acc += a.reshape(a.shape[:2] + (-1,)).sum(axis=2)
        self.steps += 1


def edge_importance(accumulator: GradientAccumulator):
    """Mean absolute gradient per edge over the accumulation window."""
    if accumulator.steps == 0:
        raise StalenessError("no backward pass accumulated since the last cycle")
    return {l: s / accumulator.steps for l, s in enumerate(accumulator.sums, start=1)}


def neuron_importance(network: NetworkState, edge_scores):
    """Sum of each neuron's outgoing edge scores; output units use incoming scores."""
    out = {}
    L = network.n_layers
    for l in range(1, L):
        s = edge_scores[l] * network.present_mask(l)
        out[l] = s.sum(axis=0)
    last = edge_scores[L - 1] * network.present_mask(L - 1)
    out[L] = last.sum(axis=1)
    return out


def importance_report(network, accumulator):
    edge = edge_importance(accumulator)
    return ImportanceReport(edge=edge, neuron=neuron_importance(network, edge))


def drop_and_grow(edges: SparseEdgeSet, scores, zeta, source_scores, target_scores, allowed, occupied=None):
    """One rewiring cycle of a single layer's edge set.

    Drops the ``floor(zeta * m)`` lowest-score edges (ties by source, then
    target) and grows as many zero-weight edges at the allowed, unoccupied
    sites with the largest ``source_score * target_score``.  ``allowed`` is an
    ``(n_out, n_in)`` boolean map; ``occupied`` marks edges of other tasks.
    Returns ``(new_edges, event)``; ``event["shortfall"]`` counts ungrown edges.
    """
    m = len(edges)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (m,):
        raise ConsistencyError(f"{scores.shape[0] if scores.ndim else 0} scores for {m} edges")
    n_drop = int(np.floor(zeta * m + 1e-12))
    event = {"layer": edges.layer, "dropped": 0, "grown": 0, "shortfall": 0}
    if n_drop == 0:
        return edges, event
    order = np.lexsort((edges.target, edges.source, scores))
    drop, keep = order[:n_drop], np.sort(order[n_drop:])

    sites = np.asarray(allowed, dtype=bool).copy()
    if occupied is not None:
        sites &= ~occupied
    sites[edges.target, edges.source] = False
    tgt, src = np.nonzero(sites)
    prio = np.asarray(source_scores)[src] * np.asarray(target_scores)[tgt]
    rank = np.lexsort((tgt, src, -prio))[:n_drop]
    g_src, g_tgt = src[rank], tgt[rank]

    blk = edges.weights.shape[1:]
    new_src = np.concatenate([edges.source[keep], g_src])
    new_tgt = np.concatenate([edges.target[keep], g_tgt])
    new_w = np.concatenate([edges.weights[keep], np.zeros((len(g_src),) + blk)])
    o = np.lexsort((new_tgt, new_src))
    event.update(dropped=n_drop, grown=len(g_src), shortfall=n_drop - len(g_src))
    return SparseEdgeSet(edges.layer, new_src[o], new_tgt[o], new_w[o], edges.task), event


def rewire_task(network: NetworkState, plan: AllocationPlan, ledger: NeuronLedger, report: ImportanceReport, zeta):
    """Apply :func:`drop_and_grow` to every layer of the plan's task in place."""
    events = []
    L = network.n_layers
    for l in plan.edge_layers:
        es = network.edge_set(l, plan.task)
        if len(es) == 0:
            continue
        own = network.owner[l - 1]
        allowed = plan.allowed_sites(l, own.shape)
        if l + 1 < L:
            allowed[ledger.fixed(l + 1), :] = False
        occupied = (own != NO_EDGE) & (own != plan.task)
        scores = report.edge[l][es.target, es.source]
        new, ev = drop_and_grow(es, scores, zeta, report.neuron[l], report.neuron[l + 1], allowed, occupied)
        if ev["dropped"]:
            network.remove_edges(l, es.source, es.target)
            network.add_edges(l, new.source, new.target, plan.task, new.weights)
        events.append(ev)
    return events


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def train_task(network: NetworkState, plan: AllocationPlan, ledger: NeuronLedger, x, y, config: TrainConfig, rng=None, log_file=None):
    """Train the plan's edges on ``(x, y)`` in place.

    Only edges owned by ``plan.task`` move; fixed neurons get no gradient.
    Returns ``(network, log, report)`` where ``report`` holds the importance
    scores of the final epoch.
    """
    config.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise ConsistencyError("empty training set")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    classes = list(plan.classes) if config.loss_scope == "task" else list(network.output_map)
    units = network.output_units(classes)
    cls_arr = np.asarray(classes)
    mask = ledger.gradient_mask()
    acc = GradientAccumulator(network)
    log = []
    report = None
    for epoch in range(config.epochs):
        acc.reset()
        total, correct = 0.0, 0
        for idx in _batches(len(x), config.batch_size, rng):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads, logits = loss_and_gradients(
                        network, x[idx], y[idx], mask=mask, output_classes=classes, rng=rng
                    )
            except NumericStateError as e:
                raise DivergenceError(f"task {plan.task} epoch {epoch}: {e}", epoch - 1) from e
            if not np.isfinite(loss):
                raise DivergenceError(f"task {plan.task} epoch {epoch}: non-finite loss", epoch - 1)
            acc.add(grads)
            sgd_step(network, grads, config.learning_rate, [plan.task])
            total += loss * len(idx)
            correct += int((cls_arr[np.argmax(logits[:, units], axis=1)] == y[idx]).sum())
        report = importance_report(network, acc)
        entry = {
            "task": int(plan.task),
            "epoch": epoch,
            "loss": total / len(x),
            "train_acc": correct / len(x),
            "drop_grow": [],
            "shortfall": False,
        }
        last = epoch == config.epochs - 1
        if config.zeta > 0 and not last and (epoch + 1) % config.cycle_period == 0:
            events = rewire_task(network, plan, ledger, report, config.zeta)
            entry["drop_grow"] = events
            entry["shortfall"] = any(e["shortfall"] for e in events)
        log.append(entry)
        if log_file is not None:
            log_file.write(json.dumps(entry) + "\n")
    return network, log, report


def fix_neurons_after_task(ledger: NeuronLedger, report: ImportanceReport, plan: AllocationPlan, fix_fractions):
    """Move the most important allocated neurons of the task to fixed.

    Hidden layers that received new incoming edges fix the top
    ``fix_fractions[l]`` of their allocated set by neuron importance (ties to
    the smaller index; already-fixed members are skipped).  The last hidden
    layer is fixed entirely when ``plan.fix_last_hidden``, otherwise it uses
    the fraction of the layer below.  The task's output units are always fixed.
    """
    L = plan.n_layers
    for l in range(plan.first_layer + 1, L - 1):
        alloc = plan.allocated(l)
        _fix_top(ledger, l, alloc, fraction_count(fix_fractions[l], len(alloc)), report.neuron[l])
    last = np.union1d(plan.layer_sources(L - 1), plan.layer_targets(L - 2) if L - 2 in plan.edges else [])
    last = last.astype(np.int64)
    if plan.fix_last_hidden:
        ledger.fix(L - 1, last)
    else:
        frac = fix_fractions.get(L - 2, 0.0)
        _fix_top(ledger, L - 1, last, fraction_count(frac, len(last)), report.neuron[L - 1])
    ledger.fix(L, plan.output_units)
    return ledger


def _fix_top(ledger, layer, alloc, count, scores):
    cand = alloc[~ledger.fixed(layer)[alloc]]
    count = min(count, len(cand))
    if count == 0:
        return
    order = np.lexsort((cand, -np.asarray(scores)[cand]))
    ledger.fix(layer, cand[order[:count]])
