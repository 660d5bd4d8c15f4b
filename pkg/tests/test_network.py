import hashlib
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import correlate

from sparsecl.exceptions import (
    ConsistencyError,
    InputShapeError,
    LabelDomainError,
    NumericStateError,
)
from sparsecl.network import (
    GradientMask,
    LayerSpec,
    NetworkState,
    backward,
    forward,
    loss_and_gradients,
    sgd_step,
)

from conftest import random_mlp, small_convnet


def edge_loop_forward(net, x):
    """Independent oracle: accumulate every MLP edge one at a time."""
    h = np.asarray(x, dtype=float)
    for l in range(1, net.n_layers):
        n_out = net.widths[l]
        z = np.zeros((h.shape[0], n_out))
        src, tgt = net.edges(l)
        for s, t in zip(src, tgt):
            z[:, t] += net.weights[l - 1][t, s, 0] * h[:, s]
        h = z if l == net.n_layers - 1 else np.maximum(z, 0)
    return h


def conv_oracle_forward(net, x):
    """Loop oracle for ``small_convnet`` using scipy's correlate."""
    def conv(h, w, own):
        n, c = h.shape[:2]
        o, _, k, _ = w.shape
        out = np.zeros((n, o, h.shape[2] - k + 1, h.shape[3] - k + 1))
        for i in range(n):
            for a in range(o):
                for b in range(c):
                    if own[a, b] >= 0:
                        out[i, a] += correlate(h[i, b], w[a, b], mode="valid")
        return out

    h = np.maximum(conv(x, net.weights[0], net.owner[0]), 0)
    n, c, hh, ww = h.shape
    h = h[:, :, : hh // 2 * 2, : ww // 2 * 2].reshape(n, c, hh // 2, 2, ww // 2, 2).max(axis=(3, 5))
    h = np.maximum(conv(h, net.weights[1], net.owner[1]), 0)
    h = h.reshape(n, -1)
    w3 = net.weights[2] * (net.owner[2] >= 0)[:, :, None]
    h = np.maximum(h @ w3.reshape(w3.shape[0], -1).T, 0)
    w4 = net.weights[3][:, :, 0] * (net.owner[3] >= 0)
    return h @ w4.T


class TestForward:
    def test_single_edge_identity(self):
        net = NetworkState((1,), [LayerSpec.dense(1, activation="identity")])
        net.add_edges(1, [0], [0], task=0, weights=[2.0])
        net.assign_output_units([0])
        logits, _ = forward(net, [[3.0]])
        assert logits.tolist() == [[6.0]]

    def test_empty_layer_zeroes_downstream(self, rng):
        net = random_mlp([4, 5, 5, 3], seed=3)
        src, tgt = net.edges(2)
        net.remove_edges(2, src, tgt)
        _, trace = forward(net, rng.normal(size=(6, 4)), trace=True)
        assert np.all(trace[3] == 0)
        assert np.all(trace[4] == 0)

    def test_masked_dense_oracle_8x8(self, rng):
        w1 = rng.normal(size=(8, 8))
        w2 = rng.normal(size=(8, 8))
        m1 = rng.random((8, 8)) < 0.5
        m2 = rng.random((8, 8)) < 0.5
        net = NetworkState((8,), [LayerSpec.dense(8), LayerSpec.dense(8, activation="identity")])
        for l, (w, m) in enumerate([(w1, m1), (w2, m2)], start=1):
            tgt, src = np.nonzero(m)
            net.add_edges(l, src, tgt, 0, w[tgt, src])
        net.assign_output_units(range(8))
        x = rng.normal(size=(16, 8))
        dense = np.maximum(x @ np.where(m1, w1, 0).T, 0) @ np.where(m2, w2, 0).T
        got, _ = forward(net, x)
        assert np.max(np.abs(got - dense)) < 1e-12

    def test_logits_width_tracks_assigned_units(self, rng):
        net = random_mlp([3, 4, 6], seed=1, n_classes=2)
        logits, _ = forward(net, rng.normal(size=(2, 3)))
        assert logits.shape == (2, 2)
        net.assign_output_units([10, 11])
        assert forward(net, rng.normal(size=(2, 3)))[0].shape == (2, 4)

    def test_eval_mode_deterministic_with_dropout(self, rng):
        layers = [LayerSpec.dense(6), LayerSpec.dropout(0.5), LayerSpec.dense(2, activation="identity")]
        net = NetworkState((4,), layers)
        net.add_edges(1, np.repeat(np.arange(4), 6), np.tile(np.arange(6), 4), 0, rng.normal(size=24))
        net.add_edges(2, np.repeat(np.arange(6), 2), np.tile(np.arange(2), 6), 0, rng.normal(size=12))
        net.assign_output_units([0, 1])
        x = rng.normal(size=(5, 4))
        a, _ = forward(net, x)
        b, _ = forward(net, x)
        assert np.array_equal(a, b)
        t1, _ = forward(net, x, mode="train", rng=np.random.default_rng(0))
        t2, _ = forward(net, x, mode="train", rng=np.random.default_rng(0))
        assert np.array_equal(t1, t2)
        assert not np.array_equal(t1, a)

    def test_trace_has_one_entry_per_neuron_layer(self, rng):
        net = small_convnet()
        _, trace = forward(net, rng.normal(size=(3, 2, 8, 8)), trace=True)
        assert len(trace) == net.n_layers
        assert [t.shape[1] for t in trace.layers] == net.widths

    def test_conv_matches_loop_oracle(self, rng):
        net = small_convnet(seed=5)
        x = rng.normal(size=(3, 2, 8, 8))
        got, _ = forward(net, x)
        assert np.max(np.abs(got - conv_oracle_forward(net, x))) < 1e-12

    def test_shape_mismatch(self):
        net = random_mlp([4, 3, 2])
        with pytest.raises(InputShapeError):
            forward(net, np.zeros((2, 5)))

    def test_non_finite_weight(self):
        net = random_mlp([4, 3, 2])
        net.weights[0][0, 0, 0] = np.nan
        with pytest.raises(NumericStateError):
            forward(net, np.zeros((1, 4)))


@settings(max_examples=25, deadline=None)
@given(
    widths=st.lists(st.integers(1, 7), min_size=3, max_size=4),
    density=st.floats(0.0, 1.0),
    seed=st.integers(0, 2**31),
)
def test_sparse_forward_equals_edge_loop(widths, density, seed):
    net = random_mlp(widths, density=density, seed=seed)
    x = np.random.default_rng(seed).normal(size=(4, widths[0]))
    got, _ = forward(net, x)
    assert np.max(np.abs(got - edge_loop_forward(net, x)), initial=0) < 1e-12


def finite_difference(net, x, y, mask, classes, layer, idx, h=1e-5):
    w = net.weights[layer - 1]
    orig = w[idx]
    w[idx] = orig + h
    lp = loss_and_gradients(net, x, y, mask, classes, mode="eval")[0]
    w[idx] = orig - h
    lm = loss_and_gradients(net, x, y, mask, classes, mode="eval")[0]
    w[idx] = orig
    return (lp - lm) / (2 * h)


class TestBackward:
    def test_full_mask_blocks_everything(self, rng):
        net = random_mlp([5, 6, 6, 3], seed=2)
        grads = backward(net, rng.normal(size=(4, 5)), [0, 1, 2, 0], GradientMask.full(net), mode="eval")
        assert all(np.all(g == 0) for g in grads)

    def test_one_edge_finite_difference(self):
        net = NetworkState((1,), [LayerSpec.dense(2, activation="identity")])
        net.add_edges(1, [0], [0], 0, [0.7])
        net.assign_output_units([0, 1])
        x, y = np.array([[1.3]]), [1]
        g = backward(net, x, y, mode="eval")[0][0, 0, 0]
        fd = finite_difference(net, x, y, None, None, 1, (0, 0, 0))
        assert abs(g - fd) <= 1e-6 * abs(fd)

    @pytest.mark.parametrize("seed", range(3))
    def test_mlp_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = random_mlp([5, 7, 6, 4], seed=seed)
        x, y = rng.normal(size=(6, 5)), rng.integers(0, 4, size=6)
        grads = backward(net, x, y, mode="eval")
        for l in range(1, net.n_layers):
            src, tgt = net.edges(l)
            for s, t in zip(src, tgt):
                fd = finite_difference(net, x, y, None, None, l, (t, s, 0))
                g = grads[l - 1][t, s, 0]
                assert abs(g - fd) <= 1e-4 * max(abs(fd), 1e-8) + 1e-10

    def test_conv_finite_differences(self, rng):
        net = small_convnet(seed=7)
        x, y = rng.normal(size=(2, 2, 8, 8)), [0, 2]
        grads = backward(net, x, y, mode="eval")
        for l in range(1, net.n_layers):
            src, tgt = net.edges(l)
            for s, t in list(zip(src, tgt))[:6]:
                idx = (t, s) + (0,) * len(net.block_shape(l))
                fd = finite_difference(net, x, y, None, None, l, idx)
                assert abs(grads[l - 1][idx] - fd) <= 1e-4 * max(abs(fd), 1e-8) + 1e-10

    def test_subset_loss_ignores_other_units(self, rng):
        net = random_mlp([3, 4, 4], seed=4)
        x = rng.normal(size=(5, 3))
        loss, grads, _ = loss_and_gradients(net, x, [2, 3, 2, 3, 2], output_classes=[2, 3], mode="eval")
        # output rows of units 0 and 1 sit outside the declared subset
        assert np.all(grads[1][:2] == 0)

    def test_label_outside_subset(self, rng):
        net = random_mlp([3, 4, 4], seed=4)
        with pytest.raises(LabelDomainError):
            backward(net, rng.normal(size=(2, 3)), [0, 1], output_classes=[2, 3])

    def test_masked_neuron_path_enumeration(self, rng):
        # input(2) -> h(2) -> h(2) -> out(2); neuron 0 of layer 3 masked.
        net = NetworkState((2,), [LayerSpec.dense(2), LayerSpec.dense(2), LayerSpec.dense(2, activation="identity")])
        net.add_edges(1, [0, 1, 1], [0, 0, 1], 0, [0.9, 0.8, 0.7])
        net.add_edges(2, [0, 1], [0, 1], 0, [1.1, 0.6])
        net.add_edges(3, [0, 0, 1, 1], [0, 1, 0, 1], 0, [0.5, -0.4, 0.3, 0.8])
        net.assign_output_units([0, 1])
        mask = GradientMask.empty(net)
        mask.fixed[3][0] = True
        x, y = np.abs(rng.normal(size=(4, 2))) + 0.1, [0, 1, 0, 1]
        grads = backward(net, x, y, mask, mode="eval")

        succ = {}
        for l in range(1, net.n_layers):
            for s, t in zip(*net.edges(l)):
                succ.setdefault((l, s), []).append((l + 1, t))

        def paths(node):
            if node[0] == net.n_layers:
                return [[node]]
            return [[node] + p for nxt in succ.get(node, []) for p in paths(nxt)]

        for l in range(1, net.n_layers):
            for s, t in zip(*net.edges(l)):
                ps = paths((l + 1, t))
                blocked = all(any(n == (3, 0) for n in p) for p in ps)
                g = grads[l - 1][t, s, 0]
                if blocked:
                    assert g == 0.0
                else:
                    assert g != 0.0
        # edges into the masked neuron, and the W_1 edge whose only path runs through it
        assert grads[1][0, 0, 0] == 0.0
        assert grads[0][0, 0, 0] == 0.0 and grads[0][0, 1, 0] == 0.0


class TestSGD:
    def test_empty_update_set(self, rng):
        net = random_mlp([4, 5, 3])
        before = [w.copy() for w in net.weights]
        sgd_step(net, [np.ones_like(w) for w in net.weights], 0.1, set())
        assert all(np.array_equal(a, b) for a, b in zip(before, net.weights))

    def test_sgd_definition(self):
        net = NetworkState((1,), [LayerSpec.dense(1, activation="identity")])
        net.add_edges(1, [0], [0], 0, [1.0])
        sgd_step(net, [np.full((1, 1, 1), 0.5)], 0.1, {0})
        assert net.weights[0][0, 0, 0] == 0.95

    def test_only_updatable_task_moves(self, rng):
        net = NetworkState((4,), [LayerSpec.dense(6), LayerSpec.dense(4, activation="identity")])
        net.add_edges(1, [0, 1, 2], [0, 1, 2], 1, rng.normal(size=3))
        net.add_edges(2, [0, 1, 2], [0, 1, 0], 1, rng.normal(size=3))
        net.add_edges(1, [3, 3], [3, 4], 2, rng.normal(size=2))
        net.add_edges(2, [3, 4], [2, 3], 2, rng.normal(size=2))
        net.assign_output_units(range(4))
        digest = hashlib.sha256(net.task_weights({1}).tobytes()).hexdigest()
        t2 = net.task_weights({2}).copy()
        for _ in range(10):
            x = rng.normal(size=(8, 4))
            g = backward(net, x, rng.integers(2, 4, size=8), output_classes=[2, 3], mode="eval")
            sgd_step(net, g, 0.1, {2})
        assert hashlib.sha256(net.task_weights({1}).tobytes()).hexdigest() == digest
        assert not np.array_equal(net.task_weights({2}), t2)

    def test_shape_mismatch(self):
        net = random_mlp([4, 5, 3])
        with pytest.raises(ConsistencyError):
            sgd_step(net, [np.zeros((1, 1, 1))], 0.1, {0})


class TestEdges:
    def test_duplicate_rejected(self):
        net = random_mlp([3, 3, 2], density=0.0)
        with pytest.raises(ConsistencyError):
            net.add_edges(1, [0, 0], [1, 1], 0)

    def test_cross_task_disjoint(self):
        net = random_mlp([3, 3, 2], density=0.0)
        net.add_edges(1, [0], [1], 0)
        with pytest.raises(ConsistencyError):
            net.add_edges(1, [0], [1], 1)

    def test_out_of_range(self):
        net = random_mlp([3, 3, 2], density=0.0)
        with pytest.raises(ConsistencyError):
            net.add_edges(1, [3], [0], 0)

    def test_edges_sorted_by_source_then_target(self):
        net = random_mlp([4, 4, 2], density=1.0)
        src, tgt = net.edges(1)
        assert list(zip(src, tgt)) == sorted(itertools.product(range(4), range(4)))
