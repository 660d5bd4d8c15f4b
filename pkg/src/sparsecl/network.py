"""Fixed-capacity layered network with structured (neuron-level) sparsity.

Neuron layers are numbered ``1..L`` with layer 1 the input and layer ``L`` the
output units.  The weight layer ``W_l`` connects neuron layer ``l`` to ``l+1``.
For dense layers a neuron is a unit; for convolution layers it is a feature
map, and an edge ``(source map, target map)`` carries a dense ``k x k`` kernel.
A dense layer fed through a flatten sees each source feature map as one neuron
whose edge carries one weight per spatial position.

Every edge is owned by exactly one task.  Weights are stored in dense blocks
with an ``owner`` array (``-1`` marks an absent edge); weights at absent
positions are kept at exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import (
    ConsistencyError,
    InputShapeError,
    LabelDomainError,
    NumericStateError,
)

LAYER_KINDS = ("dense", "conv", "maxpool", "flatten", "dropout")
ACTIVATIONS = ("relu", "identity")
NO_EDGE = -1


@dataclass(frozen=True)
class LayerSpec:
    """One entry of the architecture menu.

    ``units`` is the unit count for dense layers and the feature-map count for
    convolutions; ``kernel_size`` doubles as the pooling window for max-pool.
    """

    kind: str
    units: int = 0
    kernel_size: int = 0
    rate: float = 0.0
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind in ("dense", "conv") and self.units < 1:
            raise ValueError(f"{self.kind} layer needs units >= 1, got {self.units}")
        if self.kind == "conv" and self.kernel_size < 1:
            raise ValueError("conv layer needs kernel_size >= 1")
        if self.kind == "maxpool" and self.kernel_size < 1:
            raise ValueError("maxpool layer needs kernel_size >= 1")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")

    @classmethod
    def dense(cls, units, activation="relu"):
        return cls("dense", units=units, activation=activation)

    @classmethod
    def conv(cls, maps, kernel_size=3, activation="relu"):
        return cls("conv", units=maps, kernel_size=kernel_size, activation=activation)

    @classmethod
    def maxpool(cls, size=2):
        return cls("maxpool", kernel_size=size)

    @classmethod
    def flatten(cls):
        return cls("flatten")

    @classmethod
    def dropout(cls, rate):
        return cls("dropout", rate=rate)

    @property
    def weighted(self):
        return self.kind in ("dense", "conv")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SparseEdgeSet:
    """Edges of one task in one weight layer (``weights`` has one block per edge)."""

    layer: int
    source: np.ndarray
    target: np.ndarray
    weights: np.ndarray
    task: int

    def __len__(self):
        return len(self.source)


@dataclass
class ActivationTrace:
    """Per-neuron-layer activations ``a_l(x)``, index 0 holding layer 1 (input).

    Convolution layers are summarised by the spatial mean of each feature map.
    """

    layers: list

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, layer):
        return self.layers[layer - 1]


@dataclass
class GradientMask:
    """Per neuron layer bit-vector; ``True`` marks a fixed neuron."""

    fixed: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, network):
        return cls({l: np.zeros(w, dtype=bool) for l, w in enumerate(network.widths, start=1)})

    @classmethod
    def full(cls, network):
        return cls({l: np.ones(w, dtype=bool) for l, w in enumerate(network.widths, start=1)})

    def __getitem__(self, layer):
        return self.fixed[layer]

    def validate(self, network):
        for l, w in enumerate(network.widths, start=1):
            m = self.fixed.get(l)
            if m is not None and m.shape != (w,):
                raise ConsistencyError(f"mask for layer {l} has shape {m.shape}, expected ({w},)")


class Architecture:
    """Layer geometry of a model without any weight storage.

    The final ``LayerSpec`` must be a dense identity layer: it is the unified
    classifier, and its ``units`` is the total output capacity.
    """

    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec]):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in layers]
        self._build()

    def _build(self):
        if not self.layers or self.layers[-1].kind != "dense" or self.layers[-1].activation != "identity":
            raise ValueError("last layer must be a dense identity layer (the unified classifier)")
        shape = self.input_shape
        if len(shape) not in (1, 3):
            raise ValueError("input_shape must be (features,) or (channels, height, width)")
        flat_block = None  # spatial size carried through a flatten
        self.widths = [shape[0]]
        self.kinds = ["input"]
        self._wshapes = []
        self._positions = []  # output positions per weight layer (conv: H*W)
        self._shapes = []  # activation shape after each op, excluding batch
        for spec in self.layers:
            if spec.kind == "conv":
                if len(shape) != 3:
                    raise ValueError("conv layer needs a (C, H, W) input")
                c, h, w = shape
                k = spec.kernel_size
                if h < k or w < k:
                    raise ValueError(f"kernel {k} larger than feature map {h}x{w}")
                self._wshapes.append((spec.units, c, (k, k)))
                shape = (spec.units, h - k + 1, w - k + 1)
                self._positions.append(shape[1] * shape[2])
                self.widths.append(spec.units)
                self.kinds.append("conv")
            elif spec.kind == "maxpool":
                if len(shape) != 3:
                    raise ValueError("maxpool needs a (C, H, W) input")
                p = spec.kernel_size
                shape = (shape[0], shape[1] // p, shape[2] // p)
                if shape[1] < 1 or shape[2] < 1:
                    raise ValueError("maxpool window larger than feature map")
            elif spec.kind == "flatten":
                if len(shape) == 3:
                    flat_block = shape[1] * shape[2]
                    shape = (shape[0] * flat_block,)
            elif spec.kind == "dense":
                if len(shape) == 3:
                    raise ValueError("dense layer after a spatial layer needs an explicit flatten")
                if flat_block is not None:
                    n_in, blk = shape[0] // flat_block, flat_block
                else:
                    n_in, blk = shape[0], 1
                self._wshapes.append((spec.units, n_in, (blk,)))
                self._positions.append(1)
                shape = (spec.units,)
                flat_block = None
                self.widths.append(spec.units)
                self.kinds.append("dense")
            self._shapes.append(shape)
        self.kinds[-1] = "output"

    # -- topology -----------------------------------------------------------

    @property
    def n_layers(self):
        """``L``: number of neuron layers, input and output included."""
        return len(self.widths)

    @property
    def output_capacity(self):
        return self.widths[-1]

    def block_shape(self, layer):
        return self._wshapes[layer - 1][2]

    def block_size(self, layer):
        return int(np.prod(self.block_shape(layer)))

    def table_kind(self, layer):
        """Allocation column of a neuron layer: ``conv``, ``fc`` or ``output``.

        ``output`` names layer ``L-1``, whose allocated neurons feed the
        classifier; the input counts as ``conv`` and layer ``L`` as ``classifier``.
        """
        if layer == self.n_layers:
            return "classifier"
        if layer == self.n_layers - 1:
            return "output"
        kind = self.kinds[layer - 1]
        return "fc" if kind == "dense" else "conv"

    def weight_shape(self, layer):
        """``(n_out, n_in)`` of ``W_l``."""
        n_out, n_in, _ = self._wshapes[layer - 1]
        return n_out, n_in

    def edge_macs(self, layer):
        """Multiply-adds per sample contributed by one edge of ``W_l``."""
        return self.block_size(layer) * self._positions[layer - 1]

    def dense_macs(self, layer):
        n_out, n_in = self.weight_shape(layer)
        return n_out * n_in * self.edge_macs(layer)


class NetworkState(Architecture):
    """Weights, edge ownership and output-unit map of a fixed-capacity model.

    Output units are handed out to classes in order by
    :meth:`assign_output_units`.
    """

    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec]):
        super().__init__(input_shape, layers)
        self.weights = [np.zeros((n_out, n_in) + blk) for n_out, n_in, blk in self._wshapes]
        self.owner = [np.full((n_out, n_in), NO_EDGE, dtype=np.int32) for n_out, n_in, _ in self._wshapes]
        self.output_map: dict = {}

    @property
    def n_outputs(self):
        return len(self.output_map)

    def copy(self):
        other = NetworkState.__new__(NetworkState)
        other.__dict__.update(self.__dict__)
        other.layers = list(self.layers)
        other.weights = [w.copy() for w in self.weights]
        other.owner = [o.copy() for o in self.owner]
        other.output_map = dict(self.output_map)
        return other

    # -- output units ---------------------------------------------------------

    def assign_output_units(self, class_ids: Iterable[int]):
        units = []
        for c in class_ids:
            if c in self.output_map:
                raise ConsistencyError(f"class {c} already has output unit {self.output_map[c]}")
            u = len(self.output_map)
            if u >= self.output_capacity:
                raise ConsistencyError(f"output capacity {self.output_capacity} exhausted")
            self.output_map[c] = u
            units.append(u)
        return np.array(units, dtype=np.int64)

    def output_units(self, class_ids):
        try:
            return np.array([self.output_map[c] for c in class_ids], dtype=np.int64)
        except KeyError as e:
            raise LabelDomainError(f"class {e.args[0]} has no output unit") from None

    @property
    def unit_classes(self):
        """Class id of every assigned output unit, in unit order."""
        out = np.empty(self.n_outputs, dtype=np.int64)
        for c, u in self.output_map.items():
            out[u] = c
        return out

    # -- edges ----------------------------------------------------------------

    def _check_layer(self, layer):
        if not 1 <= layer < self.n_layers:
            raise ConsistencyError(f"weight layer {layer} outside 1..{self.n_layers - 1}")

    def add_edges(self, layer, source, target, task, weights=None):
        self._check_layer(layer)
        source = np.asarray(source, dtype=np.int64)
        target = np.asarray(target, dtype=np.int64)
        if source.shape != target.shape:
            raise ConsistencyError("source/target length mismatch")
        n_out, n_in, blk = self._wshapes[layer - 1]
        if source.size and (source.min() < 0 or source.max() >= n_in or target.min() < 0 or target.max() >= n_out):
            raise ConsistencyError(f"edge index out of range in layer {layer}")
        if len(np.unique(source * n_out + target)) != len(source):
            raise ConsistencyError(f"duplicate (source, target) pair in layer {layer}")
        own = self.owner[layer - 1]
        taken = own[target, source] != NO_EDGE
        if taken.any():
            i = int(np.argmax(taken))
            raise ConsistencyError(
                f"edge ({source[i]}, {target[i]}) in layer {layer} already owned by task {own[target[i], source[i]]}"
            )
        own[target, source] = task
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64).reshape((len(source),) + blk)
            self.weights[layer - 1][target, source] = weights
        else:
            self.weights[layer - 1][target, source] = 0.0

    def remove_edges(self, layer, source, target):
        self._check_layer(layer)
        source = np.asarray(source, dtype=np.int64)
        target = np.asarray(target, dtype=np.int64)
        own = self.owner[layer - 1]
        if (own[target, source] == NO_EDGE).any():
            raise ConsistencyError(f"removing absent edge in layer {layer}")
        own[target, source] = NO_EDGE
        self.weights[layer - 1][target, source] = 0.0

    def edges(self, layer, task=None):
        """``(source, target)`` index arrays sorted by source then target."""
        self._check_layer(layer)
        own = self.owner[layer - 1]
        present = own != NO_EDGE if task is None else own == task
        tgt, src = np.nonzero(present)
        order = np.lexsort((tgt, src))
        return src[order], tgt[order]

    def edge_set(self, layer, task):
        src, tgt = self.edges(layer, task)
        return SparseEdgeSet(layer, src, tgt, self.weights[layer - 1][tgt, src].copy(), task)

    def edge_sets(self):
        """Every non-empty ``SparseEdgeSet`` grouped by owner task."""
        out = {}
        for t in self.tasks:
            for l in range(1, self.n_layers):
                es = self.edge_set(l, t)
                if len(es):
                    out.setdefault(t, []).append(es)
        return out

    @property
    def tasks(self):
        ts = set()
        for o in self.owner:
            ts.update(int(t) for t in np.unique(o) if t != NO_EDGE)
        return sorted(ts)

    def task_weights(self, tasks):
        """Flat vector of every weight owned by ``tasks`` in canonical order."""
        tasks = np.asarray(sorted(tasks))
        parts = []
        for w, o in zip(self.weights, self.owner):
            parts.append(w[np.isin(o, tasks)].ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def present_mask(self, layer):
        return self.owner[layer - 1] != NO_EDGE


# -- numerics -------------------------------------------------------------------


def _act(z, name):
    return np.maximum(z, 0.0) if name == "relu" else z


def _act_grad(z, name):
    return (z > 0).astype(z.dtype) if name == "relu" else np.ones_like(z)


def _summary(a):
    return a.mean(axis=(2, 3)) if a.ndim == 4 else a


def _effective(network, li):
    w = network.weights[li]
    present = network.owner[li] != NO_EDGE
    return w * present.reshape(present.shape + (1,) * (w.ndim - 2))


def _conv(x, w):
    k = w.shape[-1]
    cols = sliding_window_view(x, (k, k), axis=(2, 3))
    return np.einsum("nchwij,ocij->nohw", cols, w, optimize=True), cols


def _conv_backward(dz, cols, w):
    k = w.shape[-1]
    dw = np.einsum("nohw,nchwij->ocij", dz, cols, optimize=True)
    pad = np.pad(dz, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    win = sliding_window_view(pad, (k, k), axis=(2, 3))
    dx = np.einsum("nohwij,ocij->nchw", win, w[:, :, ::-1, ::-1], optimize=True)
    return dw, dx


def _pool(x, p):
    n, c, h, w = x.shape
    h2, w2 = h // p, w // p
    xs = x[:, :, : h2 * p, : w2 * p].reshape(n, c, h2, p, w2, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, p * p)
    idx = xs.argmax(axis=-1)
    return np.take_along_axis(xs, idx[..., None], axis=-1)[..., 0], idx


def _pool_backward(dy, idx, in_shape, p):
    n, c, h, w = in_shape
    h2, w2 = dy.shape[2], dy.shape[3]
    g = np.zeros((n, c, h2, w2, p * p))
    np.put_along_axis(g, idx[..., None], dy[..., None], axis=-1)
    g = g.reshape(n, c, h2, w2, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * p, w2 * p)
    out = np.zeros(in_shape)
    out[:, :, : h2 * p, : w2 * p] = g
    return out


def _check_input(network, batch):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == len(network.input_shape):
        x = x[None]
    if x.shape[1:] != network.input_shape:
        raise InputShapeError(f"batch shape {x.shape[1:]} does not match input shape {network.input_shape}")
    return x


def _run(network, x, mode, rng, keep):
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    for li, w in enumerate(network.weights):
        if not np.isfinite(w).all():
            raise NumericStateError(f"non-finite weight in layer {li + 1}")
    cache = []
    trace = [_summary(x)]
    h = x
    li = 0
    for spec in network.layers:
        if spec.kind == "conv":
            w = _effective(network, li)
            z, cols = _conv(h, w)
            a = _act(z, spec.activation)
            cache.append(("conv", li, z, cols, w))
            trace.append(_summary(a))
            li += 1
        elif spec.kind == "dense":
            w = _effective(network, li)
            x2 = h.reshape(h.shape[0], -1)
            z = x2 @ w.reshape(w.shape[0], -1).T
            a = _act(z, spec.activation)
            cache.append(("dense", li, z, x2, w))
            trace.append(a)
            li += 1
        elif spec.kind == "maxpool":
            a, idx = _pool(h, spec.kernel_size)
            cache.append(("maxpool", h.shape, idx, spec.kernel_size))
        elif spec.kind == "flatten":
            a = h.reshape(h.shape[0], -1)
            cache.append(("flatten", h.shape))
        else:  # dropout
            if mode == "train" and spec.rate > 0:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng")
                keep_mask = (rng.random(h.shape) >= spec.rate) / (1.0 - spec.rate)
                a = h * keep_mask
            else:
                keep_mask = None
                a = h
            cache.append(("dropout", keep_mask))
        h = a
    # the final dense layer is the classifier; logits cover assigned units only
    logits = h[:, : network.n_outputs]
    return logits, h, trace, (cache if keep else None)


def forward(network: NetworkState, batch, mode="eval", trace=False, rng=None):
    """Run a batch through the network.

    Returns ``(logits, trace)``; ``trace`` is ``None`` unless requested.
    """
    x = _check_input(network, batch)
    logits, _, tr, _ = _run(network, x, mode, rng, keep=False)
    return logits, (ActivationTrace(tr) if trace else None)


def loss_and_gradients(network, batch, targets, mask=None, output_classes=None, mode="train", rng=None):
    """Softmax cross-entropy over ``output_classes`` and its per-edge gradients.

    ``targets`` are class ids; ``output_classes`` defaults to every seen class.
    Gradients of neurons marked in ``mask`` are zeroed at their pre-activation,
    so edges into them get exactly zero and nothing flows through them.
    Returns ``(loss, gradients, logits)``; ``gradients[l-1]`` matches ``W_l``.
    """
    x = _check_input(network, batch)
    targets = np.atleast_1d(np.asarray(targets))
    if len(targets) != x.shape[0]:
        raise ConsistencyError("targets and batch differ in length")
    if output_classes is None:
        output_classes = list(network.output_map)
    subset = network.output_units(output_classes)
    pos = {int(c): i for i, c in enumerate(output_classes)}
    try:
        tpos = np.array([pos[int(t)] for t in targets], dtype=np.int64)
    except KeyError as e:
        raise LabelDomainError(f"target class {e.args[0]} outside declared output subset") from None
    if mask is None:
        mask = GradientMask.empty(network)
    mask.validate(network)

    logits, out, _, cache = _run(network, x, mode, rng, keep=True)
    n = x.shape[0]
    zs = out[:, subset]
    zs = zs - zs.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), tpos].mean()
    dzs = np.exp(logp)
    dzs[np.arange(n), tpos] -= 1.0
    dzs /= n
    da = np.zeros_like(out)
    da[:, subset] = dzs

    grads = [None] * len(network.weights)
    neuron_layer = network.n_layers
    for spec, entry in zip(reversed(network.layers), reversed(cache)):
        kind = entry[0]
        if kind in ("dense", "conv"):
            _, li, z, inp, w = entry
            dz = da * _act_grad(z, spec.activation)
            fixed = mask.fixed.get(neuron_layer)
            if fixed is not None and fixed.any():
                if kind == "dense":
                    dz[:, fixed] = 0.0
                else:
                    dz[:, fixed, :, :] = 0.0
            present = network.owner[li] != NO_EDGE
            if kind == "dense":
                g = (dz.T @ inp).reshape(w.shape)
                da = (dz @ w.reshape(w.shape[0], -1))
            else:
                g, da = _conv_backward(dz, inp, w)
            g *= present.reshape(present.shape + (1,) * (g.ndim - 2))
            grads[li] = g
            neuron_layer -= 1
        elif kind == "maxpool":
            _, in_shape, idx, p = entry
            da = _pool_backward(da, idx, in_shape, p)
        elif kind == "flatten":
            da = da.reshape(entry[1])
        else:
            keep_mask = entry[1]
            if keep_mask is not None:
                da = da * keep_mask
    return float(loss), grads, logits


def backward(network, batch, targets, mask=None, output_classes=None, mode="train", rng=None):
    """Per-edge gradients of the masked cross-entropy (see :func:`loss_and_gradients`)."""
    return loss_and_gradients(network, batch, targets, mask, output_classes, mode, rng)[1]


def sgd_step(network: NetworkState, gradients, learning_rate, updatable_tasks):
    """Plain SGD on edges owned by ``updatable_tasks``; everything else is untouched."""
    if not learning_rate > 0:
        raise ValueError("learning rate must be > 0")
    if len(gradients) != len(network.weights):
        raise ConsistencyError(f"{len(gradients)} gradient arrays for {len(network.weights)} weight layers")
    tasks = np.asarray(sorted(updatable_tasks), dtype=np.int32)
    if tasks.size == 0:
        return network
    for w, o, g in zip(network.weights, network.owner, gradients):
        if g is None:
            continue
        if g.shape != w.shape:
            raise ConsistencyError(f"gradient shape {g.shape} != weight shape {w.shape}")
        upd = np.isin(o, tasks)
        if upd.any():
            w[upd] -= learning_rate * g[upd]
    return network
