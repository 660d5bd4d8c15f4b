"""Sub-network allocation for a new task.

Two allocators share one :class:`NeuronLedger`:

* :func:`allocate_spacenet_style` adds sparse edges in every layer between
  freshly sampled free neurons (no knowledge transfer).
* :func:`build_allocation` reuses every layer below ``l_reuse`` wholesale and,
  from ``l_reuse`` up, wires each class's *candidate* neurons (highest average
  activation on that class under the current model) together with shared free
  neurons.  Fixed neurons may source new edges but never receive them.
"""

from __future__ import annotations

import math
from numbers import Real
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .exceptions import (
    CapacityError,
    CapacityExhaustedError,
    ConfigError,
    ConstraintError,
    EmptyDatasetError,
)
from .network import NO_EDGE, GradientMask, NetworkState, forward

STRATEGIES = ("highest", "random", "lowest")
TABLE_KINDS = ("conv", "fc", "output")

NEVER_USED, USED, FIXED = 0, 1, 2


def round_half_up(x):
    return int(math.floor(x + 0.5 + 1e-9))


def fraction_count(fraction, n):
    """``round_half_up(fraction * n)``, at least 1 when ``fraction > 0``."""
    c = round_half_up(fraction * n)
    if fraction > 0:
        c = max(c, 1)
    return min(c, n)


def _per_layer(values, network, layers, what):
    """Resolve a ``{"conv", "fc", "output"}`` mapping or explicit list onto ``layers``.

    For densities ``layers`` are weight layers and the kind of the *source*
    neuron layer picks the column; the input layer counts as ``conv``.
    """
    if isinstance(values, Mapping):
        out = {}
        for l in layers:
            kind = network.table_kind(l)
            if kind == "classifier":
                raise ValueError(f"{what}: no column for the classifier layer")
            if kind not in values:
                raise ConfigError([(what, f"missing value for {kind!r} layers")])
            out[l] = float(values[kind])
        return out
    if isinstance(values, Real):
        return {l: float(values) for l in layers}
    values = list(values)
    if len(values) != len(layers):
        raise ConfigError([(what, f"expected {len(layers)} per-layer values, got {len(values)}")])
    return {l: float(v) for l, v in zip(layers, values)}


@dataclass
class AllocationConfig:
    """Allocation hyper-parameters.

    ``density``, ``alloc_fraction`` and ``fix_fraction`` take a single number
    for every layer, a mapping keyed by layer kind (``conv``, ``fc`` and
    ``output`` for the last hidden layer) or an explicit per-layer list.  Densities are indexed by weight
    layer ``1..L-1``; the two fractions by hidden neuron layer ``2..L-1``.
    ``l_reuse`` and ``reuse_start_task`` are 1-based.
    """

    l_reuse: int = 2
    density: object = field(default_factory=lambda: {"conv": 0.25, "fc": 0.25, "output": 0.7})
    alloc_fraction: object = field(default_factory=lambda: {"conv": 0.7, "fc": 0.2, "output": 0.1})
    candidate_fraction: float = 0.3
    fix_fraction: object = field(default_factory=lambda: {"conv": 0.1, "fc": 0.3, "output": 1.0})
    candidate_strategy: str = "highest"
    reuse_start_task: int = 1

    def validate(self, network=None):
        errors = []
        if not 0.0 <= self.candidate_fraction < 1.0:
            errors.append(("candidate_fraction", "must lie in [0, 1) so a free remainder exists"))
        if self.candidate_strategy not in STRATEGIES:
            errors.append(("candidate_strategy", f"must be one of {STRATEGIES}"))
        if self.reuse_start_task < 1:
            errors.append(("reuse_start_task", "must be >= 1"))
        for name, lo_open in (("density", True), ("alloc_fraction", True), ("fix_fraction", False)):
            vals = getattr(self, name)
            for v in _plain_values(vals):
                if not ((0.0 < v <= 1.0) if lo_open else (0.0 <= v <= 1.0)):
                    errors.append((name, f"value {v} outside {'(0, 1]' if lo_open else '[0, 1]'}"))
        if network is not None:
            L = network.n_layers
            if not 2 <= self.l_reuse <= L - 2:
                errors.append(("l_reuse", f"must lie in [2, L-2] = [2, {L - 2}] so new edges reach at least one hidden layer"))
            try:
                self.resolve(network)
            except ConfigError as e:
                errors.extend(e.errors)
        if errors:
            raise ConfigError(errors)
        return self

    def resolve(self, network):
        L = network.n_layers
        return ResolvedAllocation(
            density=_per_layer(self.density, network, range(1, L), "density"),
            alloc_fraction=_per_layer(self.alloc_fraction, network, range(2, L), "alloc_fraction"),
            fix_fraction=_per_layer(self.fix_fraction, network, range(2, L), "fix_fraction"),
        )

    def to_dict(self):
        return {
            "l_reuse": self.l_reuse,
            "density": _plain(self.density),
            "alloc_fraction": _plain(self.alloc_fraction),
            "candidate_fraction": self.candidate_fraction,
            "fix_fraction": _plain(self.fix_fraction),
            "candidate_strategy": self.candidate_strategy,
            "reuse_start_task": self.reuse_start_task,
        }


def _plain(v):
    if isinstance(v, Real):
        return float(v)
    return dict(v) if isinstance(v, Mapping) else list(v)


def _plain_values(v):
    if isinstance(v, Real):
        return [v]
    return list(v.values()) if isinstance(v, Mapping) else list(v)


@dataclass
class ResolvedAllocation:
    density: dict
    alloc_fraction: dict
    fix_fraction: dict

    def alloc_count(self, network, layer):
        return fraction_count(self.alloc_fraction[layer], network.widths[layer - 1])


class NeuronLedger:
    """Status of every neuron: never-used -> used -> fixed, plus owning tasks."""

    def __init__(self, widths):
        self.widths = list(widths)
        self.status = {l: np.zeros(w, dtype=np.int8) for l, w in enumerate(self.widths, start=1)}
        self.owners = {l: [set() for _ in range(w)] for l, w in enumerate(self.widths, start=1)}

    @classmethod
    def for_network(cls, network):
        return cls(network.widths)

    def copy(self):
        other = NeuronLedger(self.widths)
        other.status = {l: s.copy() for l, s in self.status.items()}
        other.owners = {l: [set(o) for o in os_] for l, os_ in self.owners.items()}
        return other

    def mark_used(self, layer, neurons, task):
        neurons = np.asarray(neurons, dtype=np.int64)
        s = self.status[layer]
        s[neurons] = np.maximum(s[neurons], USED)
        for n in neurons:
            self.owners[layer][n].add(int(task))

    def fix(self, layer, neurons):
        neurons = np.asarray(neurons, dtype=np.int64)
        self.status[layer][neurons] = FIXED

    def fixed(self, layer):
        return self.status[layer] == FIXED

    def never_used(self, layer):
        return self.status[layer] == NEVER_USED

    def used_unfixed(self, layer):
        return self.status[layer] == USED

    def counts(self):
        return {
            l: {"never_used": int((s == NEVER_USED).sum()), "used": int((s == USED).sum()), "fixed": int((s == FIXED).sum())}
            for l, s in self.status.items()
        }

    def gradient_mask(self):
        return GradientMask({l: s == FIXED for l, s in self.status.items()})

    def to_dict(self):
        return {
            "widths": self.widths,
            "status": {str(l): s.tolist() for l, s in self.status.items()},
            "owners": {str(l): [sorted(o) for o in os_] for l, os_ in self.owners.items()},
        }

    @classmethod
    def from_dict(cls, d):
        led = cls(d["widths"])
        for l, s in d["status"].items():
            led.status[int(l)] = np.asarray(s, dtype=np.int8)
        for l, os_ in d["owners"].items():
            led.owners[int(l)] = [set(o) for o in os_]
        return led


@dataclass
class CandidateSet:
    """Candidate neurons ``R_l^c`` of one class with their activation scores."""

    class_id: int
    neurons: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)


@dataclass
class AllocationPlan:
    """New sparse edges of one task and the neuron sets they were drawn between.

    ``sources[c][l]`` / ``targets[c][l]`` are the source and target neuron sets
    of weight layer ``l`` for class ``c``; ``edges[l]`` is the union over
    classes as ``(source, target)`` arrays.
    """

    task: int
    mode: str
    first_layer: int
    n_layers: int
    classes: list
    output_units: np.ndarray
    candidates: dict = field(default_factory=dict)
    free: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)
    edges: dict = field(default_factory=dict)
    class_edge_counts: dict = field(default_factory=dict)
    shortfalls: list = field(default_factory=list)
    fix_last_hidden: bool = True
    rules: tuple = ("a", "b", "c", "d")

    @property
    def edge_layers(self):
        return sorted(self.edges)

    def n_edges(self, layer=None):
        if layer is None:
            return sum(len(s) for s, _ in self.edges.values())
        return len(self.edges.get(layer, ((), ()))[0])

    def layer_sources(self, layer):
        parts = [self.sources[c][layer] for c in self.classes if layer in self.sources[c]]
        return np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)

    def layer_targets(self, layer):
        parts = [self.targets[c][layer] for c in self.classes if layer in self.targets[c]]
        return np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)

    def allocated(self, layer):
        """``h_l^alloc`` of a hidden neuron layer that received new incoming edges."""
        if not self.first_layer < layer < self.n_layers:
            return np.zeros(0, dtype=np.int64)
        return np.union1d(self.layer_sources(layer), self.layer_targets(layer - 1))

    def allowed_sites(self, layer, shape):
        """Boolean ``(n_out, n_in)`` map of positions inside some class's rectangle."""
        allowed = np.zeros(shape, dtype=bool)
        for c in self.classes:
            if layer in self.sources[c]:
                allowed[np.ix_(self.targets[c][layer], self.sources[c][layer])] = True
        return allowed

    def to_dict(self):
        def sets(d):
            return {str(l): np.asarray(v).tolist() for l, v in d.items()}

        return {
            "task": self.task,
            "mode": self.mode,
            "first_layer": self.first_layer,
            "n_layers": self.n_layers,
            "classes": [int(c) for c in self.classes],
            "output_units": np.asarray(self.output_units).tolist(),
            "candidates": {str(c): sets(v) for c, v in self.candidates.items()},
            "free": sets(self.free),
            "sources": {str(c): sets(v) for c, v in self.sources.items()},
            "targets": {str(c): sets(v) for c, v in self.targets.items()},
            "edges": {str(l): np.stack([s, t], axis=1).tolist() for l, (s, t) in self.edges.items()},
            "class_edge_counts": {str(c): {str(l): n for l, n in v.items()} for c, v in self.class_edge_counts.items()},
            "shortfalls": self.shortfalls,
            "fix_last_hidden": self.fix_last_hidden,
            "rules": list(self.rules),
        }

    @classmethod
    def from_dict(cls, d):
        def sets(v):
            return {int(l): np.asarray(x, dtype=np.int64) for l, x in v.items()}

        edges = {}
        for l, pairs in d["edges"].items():
            arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
            edges[int(l)] = (arr[:, 0], arr[:, 1])
        return cls(
            task=d["task"],
            mode=d["mode"],
            first_layer=d["first_layer"],
            n_layers=d["n_layers"],
            classes=list(d["classes"]),
            output_units=np.asarray(d["output_units"], dtype=np.int64),
            candidates={int(c): sets(v) for c, v in d["candidates"].items()},
            free=sets(d["free"]),
            sources={int(c): sets(v) for c, v in d["sources"].items()},
            targets={int(c): sets(v) for c, v in d["targets"].items()},
            edges=edges,
            class_edge_counts={int(c): {int(l): n for l, n in v.items()} for c, v in d["class_edge_counts"].items()},
            shortfalls=list(d["shortfalls"]),
            fix_last_hidden=d["fix_last_hidden"],
            rules=tuple(d["rules"]),
        )


# -- operations -------------------------------------------------------------------


def average_class_activation(network: NetworkState, class_data, batch_size=256):
    """Mean activation of every neuron layer over one class's samples.

    Returns a list indexed like :class:`ActivationTrace` (entry ``l-1`` is
    layer ``l``).
    """
    x = np.asarray(class_data, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyDatasetError("class data is empty")
    sums = None
    for i in range(0, x.shape[0], batch_size):
        _, tr = forward(network, x[i : i + batch_size], mode="eval", trace=True)
        part = [a.sum(axis=0) for a in tr.layers]
        sums = part if sums is None else [s + p for s, p in zip(sums, part)]
    return [s / x.shape[0] for s in sums]


def select_candidates(scores, kappa, strategy="highest", rng=None):
    """Indices of ``kappa`` candidate neurons; ties go to the smaller index."""
    scores = np.asarray(scores, dtype=np.float64)
    width = scores.shape[0]
    if kappa > width:
        raise CapacityError(f"kappa={kappa} exceeds layer width {width}")
    if kappa <= 0:
        return np.zeros(0, dtype=np.int64)
    if not np.isfinite(scores).all():
        raise ValueError("activation scores must be finite")
    idx = np.arange(width)
    if strategy == "highest":
        order = np.lexsort((idx, -scores))
    elif strategy == "lowest":
        order = np.lexsort((idx, scores))
    elif strategy == "random":
        if rng is None:
            raise ValueError("random strategy needs an rng")
        return np.sort(rng.choice(width, size=kappa, replace=False))
    else:
        raise ValueError(f"unknown candidate strategy {strategy!r}")
    return order[:kappa].astype(np.int64)


def select_free_neurons(ledger: NeuronLedger, layer, count, rng, tiered=True):
    """Sample ``count`` non-fixed neurons, drawing never-used ones first.

    With ``tiered=False`` the draw is uniform over every non-fixed neuron.
    """
    never = np.flatnonzero(ledger.never_used(layer))
    used = np.flatnonzero(ledger.used_unfixed(layer))
    if count > len(never) + len(used):
        raise CapacityExhaustedError(layer, count, len(never) + len(used))
    if not tiered:
        pool = np.concatenate([never, used])
        return np.sort(rng.choice(pool, size=count, replace=False)).astype(np.int64)
    if count <= len(never):
        picked = rng.choice(never, size=count, replace=False) if count else never[:0]
    else:
        rest = rng.choice(used, size=count - len(never), replace=False)
        picked = np.concatenate([never, rest])
    return np.sort(picked).astype(np.int64)


def _sample_edges(network, layer, src, tgt, density, priority):
    """Pick ``round(density*|src|*|tgt|)`` unowned pairs of ``src x tgt``.

    ``priority`` is a random ``(n_out, n_in)`` map shared by every class of
    the task: each class takes its lowest-priority pairs, which is a uniform
    sample of its rectangle, and classes with equal rectangles get equal sets.
    """
    requested = fraction_count(density, len(src) * len(tgt)) if len(src) and len(tgt) else 0
    if requested == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), 0, 0
    ss, tt = np.meshgrid(src, tgt, indexing="ij")
    ss, tt = ss.ravel(), tt.ravel()
    free = network.owner[layer - 1][tt, ss] == NO_EDGE
    ss, tt = ss[free], tt[free]
    n = min(requested, len(ss))
    pick = np.argsort(priority[tt, ss], kind="stable")[:n]
    pick.sort()
    return ss[pick], tt[pick], requested, n


def _union_edges(parts):
    if not parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    s = np.concatenate([p[0] for p in parts])
    t = np.concatenate([p[1] for p in parts])
    pairs = np.unique(np.stack([s, t], axis=1), axis=0)
    return pairs[:, 0], pairs[:, 1]


def init_weights(network, plan, rng):
    """Uniform ``[-b, b]`` weights, ``b = sqrt(6 / (fan_in + fan_out))`` over allocated sets."""
    out = {}
    for l in plan.edge_layers:
        src, tgt = plan.edges[l]
        blk = network.block_shape(l)
        fan_in = len(plan.layer_sources(l)) * int(np.prod(blk))
        fan_out = len(plan.layer_targets(l)) * (int(np.prod(blk)) if len(blk) == 2 else 1)
        b = math.sqrt(6.0 / max(fan_in + fan_out, 1))
        out[l] = rng.uniform(-b, b, size=(len(src),) + blk)
    return out


def apply_plan(network, ledger, plan, rng):
    """Add the plan's edges to the network and mark their neurons used."""
    weights = init_weights(network, plan, rng)
    for l in plan.edge_layers:
        src, tgt = plan.edges[l]
        network.add_edges(l, src, tgt, plan.task, weights[l])
        if l > 1:
            ledger.mark_used(l, plan.layer_sources(l), plan.task)
        ledger.mark_used(l + 1, plan.layer_targets(l), plan.task)
    return network


def _finish_plan(plan, network, resolved, rng):
    L = network.n_layers
    for c in plan.classes:
        plan.class_edge_counts[c] = {}
    for l in range(plan.first_layer, L):
        parts = []
        priority = rng.random(network.owner[l - 1].shape)
        for c in plan.classes:
            src, tgt = plan.sources[c][l], plan.targets[c][l]
            s, t, requested, n = _sample_edges(network, l, src, tgt, resolved.density[l], priority)
            if n < requested:
                plan.shortfalls.append({"layer": l, "class": int(c), "requested": requested, "allocated": n})
            plan.class_edge_counts[c][l] = n
            parts.append((s, t))
        plan.edges[l] = _union_edges(parts)
    return plan


def allocate_spacenet_style(network, ledger, config, task, classes, output_units, rng, fix_last_hidden=True):
    """Sparse edges in every layer between freshly sampled free neurons."""
    L = network.n_layers
    resolved = config.resolve(network)
    free = {1: np.arange(network.widths[0], dtype=np.int64)}
    for l in range(2, L):
        # without fixed output-adjacent neurons, old unfixed ones are fair game again
        tiered = fix_last_hidden or l < L - 1
        free[l] = select_free_neurons(ledger, l, resolved.alloc_count(network, l), rng, tiered)
    free[L] = np.asarray(output_units, dtype=np.int64)
    plan = AllocationPlan(
        task=task,
        mode="spacenet",
        first_layer=1,
        n_layers=L,
        classes=list(classes),
        output_units=free[L],
        free=free,
        fix_last_hidden=fix_last_hidden,
        rules=("b",) + (("d",) if fix_last_hidden else ()),
    )
    for c, unit in zip(plan.classes, free[L]):
        plan.candidates[c] = {}
        plan.sources[c] = {l: free[l] for l in range(1, L)}
        plan.targets[c] = {l: free[l + 1] for l in range(1, L - 1)}
        plan.targets[c][L - 1] = np.array([unit], dtype=np.int64)
    return _finish_plan(plan, network, resolved, rng)


def build_allocation(
    network,
    ledger,
    config: AllocationConfig,
    task_data,
    task,
    output_units,
    rng,
    candidates_in_last_layer=False,
    reuse_all=False,
    fix_last_hidden=True,
):
    """Candidate/free allocation from ``l_reuse`` upward.

    ``task_data`` maps class id -> samples of that class (one task only).
    ``reuse_all`` sets ``l_reuse = L-1``; since the only allocated layer is
    then the classifier, candidates are taken in layer ``L-1`` for it.
    """
    L = network.n_layers
    resolved = config.resolve(network)
    l_reuse = L - 1 if reuse_all else config.l_reuse
    if not reuse_all and not 2 <= l_reuse <= L - 2:
        raise ConstraintError("c", f"l_reuse={l_reuse} outside [2, {L - 2}]")
    classes = list(task_data)
    if len(output_units) != len(classes):
        raise ValueError("one output unit per class is required")
    last_cand = L - 1 if (candidates_in_last_layer or reuse_all) else L - 2
    cand_layers = list(range(l_reuse, last_cand + 1))

    kappa = {}
    for l in range(l_reuse, L):
        n_alloc = resolved.alloc_count(network, l)
        kappa[l] = min(round_half_up(config.candidate_fraction * n_alloc), n_alloc - 1) if l in cand_layers else 0

    candidates = {}
    cand_sets = []
    for c in classes:
        scores = average_class_activation(network, task_data[c])
        cs = CandidateSet(c)
        for l in cand_layers:
            cs.neurons[l] = select_candidates(scores[l - 1], kappa[l], config.candidate_strategy, rng)
            cs.scores[l] = scores[l - 1][cs.neurons[l]]
        candidates[c] = cs.neurons
        cand_sets.append(cs)

    free = {}
    for l in range(l_reuse, L):
        tiered = fix_last_hidden or l < L - 1
        free[l] = select_free_neurons(ledger, l, resolved.alloc_count(network, l) - kappa[l], rng, tiered)
    free[L] = np.asarray(output_units, dtype=np.int64)

    rules = ["b"]
    if not candidates_in_last_layer and not reuse_all:
        rules.append("a")
    if not reuse_all:
        rules.append("c")
    if fix_last_hidden:
        rules.append("d")
    plan = AllocationPlan(
        task=task,
        mode="afaf",
        first_layer=l_reuse,
        n_layers=L,
        classes=classes,
        output_units=free[L],
        candidates=candidates,
        free=free,
        fix_last_hidden=fix_last_hidden,
        rules=tuple(sorted(rules)),
    )
    plan.candidate_sets = cand_sets
    for c, unit in zip(classes, free[L]):
        R = candidates[c]
        plan.sources[c] = {}
        plan.targets[c] = {}
        for l in range(l_reuse, L):
            plan.sources[c][l] = np.union1d(R.get(l, np.zeros(0, np.int64)), free[l]).astype(np.int64)
            if l + 1 == L:
                # each class feeds only its own output unit
                plan.targets[c][l] = np.array([unit], dtype=np.int64)
                continue
            nxt = R.get(l + 1, np.zeros(0, np.int64))
            nxt = nxt[~ledger.fixed(l + 1)[nxt]]
            plan.targets[c][l] = np.union1d(nxt, free[l + 1]).astype(np.int64)
    return _finish_plan(plan, network, resolved, rng)


def enforce_ambiguity_constraints(plan: AllocationPlan, ledger: NeuronLedger, rules=None):
    """Check a plan against the class-ambiguity rules it was built under.

    (a) classifier edges start at free neurons only; (b) no edge targets a
    fixed neuron; (c) ``l_reuse`` in ``[2, L-2]`` with no edges below it;
    (d) every neuron of ``h_{L-1}^alloc`` is scheduled for fixing.
    """
    rules = plan.rules if rules is None else tuple(rules)
    L = plan.n_layers
    if "a" in rules and L - 1 in plan.edges:
        src = plan.edges[L - 1][0]
        allowed = plan.free.get(L - 1, np.zeros(0, np.int64))
        bad = np.setdiff1d(src, allowed)
        if bad.size or ledger.fixed(L - 1)[src].any():
            raise ConstraintError("a", f"classifier edges leave non-free neurons {bad[:5].tolist()}")
    if "b" in rules:
        for l, (src, tgt) in plan.edges.items():
            if l + 1 < L and ledger.fixed(l + 1)[tgt].any():
                n = int(tgt[ledger.fixed(l + 1)[tgt]][0])
                raise ConstraintError("b", f"edge into fixed neuron {n} of layer {l + 1}")
    if "c" in rules and plan.mode == "afaf":
        if not 2 <= plan.first_layer <= L - 2:
            raise ConstraintError("c", f"l_reuse={plan.first_layer} outside [2, {L - 2}]")
        low = [l for l in plan.edges if l < plan.first_layer and len(plan.edges[l][0])]
        if low:
            raise ConstraintError("c", f"edges allocated below l_reuse in layers {low}")
    if "d" in rules and not plan.fix_last_hidden:
        raise ConstraintError("d", "last hidden layer is not scheduled for full fixing")
    return plan
