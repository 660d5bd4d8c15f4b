import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsecl.allocation import (
    AllocationConfig,
    AllocationPlan,
    NeuronLedger,
    allocate_spacenet_style,
    apply_plan,
    average_class_activation,
    build_allocation,
    enforce_ambiguity_constraints,
    fraction_count,
    round_half_up,
    select_candidates,
    select_free_neurons,
)
from sparsecl.exceptions import (
    CapacityError,
    CapacityExhaustedError,
    ConfigError,
    ConstraintError,
    EmptyDatasetError,
)
from sparsecl.network import LayerSpec, NetworkState, forward

from conftest import random_mlp


def empty_mlp(widths, capacity=None):
    layers = [LayerSpec.dense(w) for w in widths[1:-1]] + [LayerSpec.dense(capacity or widths[-1], activation="identity")]
    return NetworkState((widths[0],), layers)


def first_task(net, ledger, config, classes, seed=0):
    rng = np.random.default_rng(seed)
    units = net.assign_output_units(classes)
    plan = allocate_spacenet_style(net, ledger, config, 0, classes, units, rng)
    enforce_ambiguity_constraints(plan, ledger)
    apply_plan(net, ledger, plan, rng)
    L = net.n_layers
    ledger.fix(L - 1, plan.free[L - 1])
    ledger.fix(L, units)
    return plan


class TestRounding:
    def test_half_up(self):
        assert round_half_up(2.5) == 3
        assert round_half_up(0.5) == 1
        assert round_half_up(1.49) == 1

    def test_floor_clamp(self):
        assert fraction_count(0.01, 10) == 1
        assert fraction_count(0.0, 10) == 0
        assert fraction_count(1.0, 7) == 7


class TestAverageActivation:
    def test_single_sample_equals_trace(self):
        net = random_mlp([5, 4, 3], seed=2)
        x = np.random.default_rng(0).normal(size=(1, 5))
        _, tr = forward(net, x, trace=True)
        avg = average_class_activation(net, x)
        for a, b in zip(avg, tr.layers):
            np.testing.assert_array_equal(a, b[0])

    def test_symmetric_identity_is_zero(self):
        net = NetworkState((3,), [LayerSpec.dense(2, activation="identity")])
        net.add_edges(1, [0, 1, 2], [0, 1, 1], 0, [1.0, -2.0, 0.5])
        net.assign_output_units([0, 1])
        v = np.array([[1.0, 2.0, -3.0]])
        avg = average_class_activation(net, np.vstack([v, -v]))
        np.testing.assert_allclose(avg[1], 0.0, atol=1e-15)

    def test_matches_loop(self):
        net = random_mlp([6, 5, 4], seed=7)
        x = np.random.default_rng(3).normal(size=(10, 6))
        avg = average_class_activation(net, x, batch_size=3)
        W1 = net.weights[0][..., 0] * (net.owner[0] >= 0)
        W2 = net.weights[1][..., 0] * (net.owner[1] >= 0)
        acc = [np.zeros(6), np.zeros(5), np.zeros(4)]
        for s in x:
            h1 = np.maximum(W1 @ s, 0)
            acc[0] += s
            acc[1] += h1
            acc[2] += W2 @ h1
        for a, b in zip(avg, acc):
            np.testing.assert_allclose(a, b / 10, atol=1e-12)

    def test_nonnegative_under_relu(self):
        net = random_mlp([6, 5, 4], seed=1)
        avg = average_class_activation(net, np.random.default_rng(0).normal(size=(8, 6)))
        assert (avg[1] >= 0).all()

    def test_empty(self):
        net = random_mlp([3, 2, 2])
        with pytest.raises(EmptyDatasetError):
            average_class_activation(net, np.zeros((0, 3)))


class TestSelectCandidates:
    def test_highest(self):
        assert set(select_candidates([0.5, 0.1, 0.9, 0.3], 2)) == {2, 0}

    def test_lowest(self):
        assert set(select_candidates([0.5, 0.1, 0.9, 0.3], 2, "lowest")) == {1, 3}

    def test_zero(self):
        assert len(select_candidates([1.0, 2.0], 0)) == 0

    def test_ties(self):
        assert list(select_candidates([0.4, 0.4, 0.4], 2)) == [0, 1]
        assert list(select_candidates([0.4, 0.4, 0.4], 2, "lowest")) == [0, 1]

    def test_random_distinct_and_seeded(self):
        a = select_candidates(np.zeros(20), 5, "random", np.random.default_rng(1))
        b = select_candidates(np.zeros(20), 5, "random", np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)
        assert len(set(a)) == 5

    def test_too_many(self):
        with pytest.raises(CapacityError):
            select_candidates([1.0, 2.0], 3)

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.data())
    @settings(max_examples=100, deadline=None)
    def test_highest_dominates(self, scores, data):
        kappa = data.draw(st.integers(0, len(scores)))
        picked = select_candidates(scores, kappa)
        assert len(set(picked)) == kappa
        rest = np.setdiff1d(np.arange(len(scores)), picked)
        if kappa and rest.size:
            s = np.asarray(scores)
            assert s[picked].min() >= s[rest].max()


class TestSelectFree:
    def test_full_layer(self, rng):
        led = NeuronLedger([3, 6, 2])
        np.testing.assert_array_equal(select_free_neurons(led, 2, 6, rng), np.arange(6))

    def test_prefers_never_used(self, rng):
        led = NeuronLedger([3, 6, 2])
        led.mark_used(2, [0, 1, 2], task=0)
        picked = select_free_neurons(led, 2, 3, rng)
        np.testing.assert_array_equal(picked, [3, 4, 5])

    def test_fallback_tier(self, rng):
        led = NeuronLedger([3, 6, 2])
        led.mark_used(2, range(6), task=0)
        led.fix(2, [0, 1])
        picked = select_free_neurons(led, 2, 3, rng)
        assert len(set(picked)) == 3 and set(picked) <= {2, 3, 4, 5}

    def test_mixed_tiers(self, rng):
        led = NeuronLedger([3, 6, 2])
        led.mark_used(2, [0, 1, 2, 3], task=0)
        picked = select_free_neurons(led, 2, 4, rng)
        assert {4, 5} <= set(picked)

    def test_pigeonhole(self, rng):
        led = NeuronLedger([3, 10, 2])
        led.fix(2, range(8))
        with pytest.raises(CapacityExhaustedError) as e:
            select_free_neurons(led, 2, 3, rng)
        assert e.value.available == 2

    def test_seeded(self):
        led = NeuronLedger([3, 30, 2])
        a = select_free_neurons(led, 2, 7, np.random.default_rng(5))
        b = select_free_neurons(led, 2, 7, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)


class TestLedger:
    def test_monotone(self):
        led = NeuronLedger([2, 3])
        led.fix(2, [0])
        led.mark_used(2, [0, 1], task=1)
        assert list(led.status[2]) == [2, 1, 0]
        assert led.owners[2][0] == {1}

    def test_roundtrip(self):
        led = NeuronLedger([2, 3])
        led.mark_used(2, [1], task=4)
        led.fix(2, [2])
        back = NeuronLedger.from_dict(json.loads(json.dumps(led.to_dict())))
        np.testing.assert_array_equal(back.status[2], led.status[2])
        assert back.owners[2][1] == {4}

    def test_gradient_mask(self):
        led = NeuronLedger([2, 3])
        led.fix(2, [1])
        assert list(led.gradient_mask().fixed[2]) == [False, True, False]


class TestConfig:
    def test_l_reuse_range(self):
        net = empty_mlp([4, 6, 6, 6, 4])
        AllocationConfig(l_reuse=3).validate(net)
        with pytest.raises(ConfigError):
            AllocationConfig(l_reuse=4).validate(net)
        with pytest.raises(ConfigError):
            AllocationConfig(l_reuse=1).validate(net)

    def test_fraction_ranges(self):
        with pytest.raises(ConfigError):
            AllocationConfig(candidate_fraction=1.0).validate()
        with pytest.raises(ConfigError):
            AllocationConfig(density={"conv": 0.0, "fc": 0.1, "output": 0.1}).validate()

    def test_resolve_by_kind(self):
        net = empty_mlp([4, 6, 6, 6, 4])
        r = AllocationConfig(density={"conv": 0.9, "fc": 0.2, "output": 0.5}).resolve(net)
        # input counts as conv; last hidden layer feeds the classifier
        assert r.density == {1: 0.9, 2: 0.2, 3: 0.2, 4: 0.5}

    def test_resolve_list_length(self):
        net = empty_mlp([4, 6, 6, 4])
        with pytest.raises(ConfigError):
            AllocationConfig(alloc_fraction=[0.5]).resolve(net)


class TestSpacenetStyle:
    def test_touches_every_layer(self):
        net = empty_mlp([5, 8, 8, 4])
        led = NeuronLedger.for_network(net)
        cfg = AllocationConfig(alloc_fraction=[0.5, 0.5], density=[0.5, 0.5, 0.5])
        plan = first_task(net, led, cfg, [0, 1])
        assert plan.edge_layers == [1, 2, 3]
        assert all(plan.n_edges(l) > 0 for l in plan.edge_layers)

    def test_deterministic(self):
        cfg = AllocationConfig(alloc_fraction=[0.5, 0.5], density=[0.5, 0.5, 0.5])
        plans = []
        for _ in range(2):
            net = empty_mlp([5, 8, 8, 4])
            plans.append(first_task(net, NeuronLedger.for_network(net), cfg, [0, 1], seed=9).to_dict())
        assert plans[0] == plans[1]

    def test_edge_counts(self):
        net = empty_mlp([5, 8, 8, 4])
        led = NeuronLedger.for_network(net)
        cfg = AllocationConfig(alloc_fraction=[0.5, 0.25], density=[0.5, 0.5, 1.0])
        plan = first_task(net, led, cfg, [0, 1])
        # per class: 5*4, 4*2, 2*1 possible pairs; classes share hidden sets
        assert plan.class_edge_counts[0] == {1: 10, 2: 4, 3: 2}
        assert plan.n_edges(3) == 4
        # identical rectangles share one draw
        assert plan.n_edges(1) == 10


class TestBuildAllocation:
    def setup_reused(self):
        """Task 0 used neurons 0..2 of layer 2 with positive activation."""
        net = empty_mlp([4, 6, 6, 2], capacity=4)
        net.add_edges(1, [0, 1, 2], [0, 1, 2], 0, [1.0, 2.0, 3.0])
        net.add_edges(2, [0], [0], 0, [1.0])
        net.add_edges(3, [0, 0], [0, 1], 0, [1.0, -1.0])
        net.assign_output_units([0, 1])
        led = NeuronLedger.for_network(net)
        led.mark_used(2, [0, 1, 2], 0)
        led.mark_used(3, [0], 0)
        led.fix(3, [0])
        led.fix(4, [0, 1])
        return net, led

    def test_worked_example(self):
        net, led = self.setup_reused()
        cfg = AllocationConfig(
            l_reuse=2, density=[0.5, 0.5, 0.5], alloc_fraction=[4 / 6, 2 / 6], candidate_fraction=0.5
        )
        units = net.assign_output_units([7])
        x = np.ones((3, 4))
        plan = build_allocation(net, led, cfg, {7: x}, 1, units, np.random.default_rng(0))
        R = plan.candidates[7][2]
        # highest activations are neurons 2 and 1
        np.testing.assert_array_equal(R, [2, 1])
        assert set(plan.free[2]) <= {3, 4, 5} and len(plan.free[2]) == 2
        assert len(plan.sources[7][2]) == 4
        assert 0 not in plan.free[3]
        assert plan.class_edge_counts[7] == {2: round(0.5 * 4 * 2), 3: 1}
        assert plan.edge_layers == [2, 3]
        np.testing.assert_array_equal(plan.free[4], [2])
        enforce_ambiguity_constraints(plan, led)

    def test_full_density_is_complete(self):
        net, led = self.setup_reused()
        cfg = AllocationConfig(l_reuse=2, density=[1.0, 1.0, 1.0], alloc_fraction=[4 / 6, 2 / 6], candidate_fraction=0.5)
        units = net.assign_output_units([7])
        plan = build_allocation(net, led, cfg, {7: np.ones((2, 4))}, 1, units, np.random.default_rng(0))
        s, t = plan.edges[2]
        assert len(s) == len(plan.sources[7][2]) * len(plan.targets[7][2])

    def test_orthogonal_activation_still_kappa(self):
        net, led = self.setup_reused()
        cfg = AllocationConfig(l_reuse=2, density=[0.5] * 3, alloc_fraction=[4 / 6, 2 / 6], candidate_fraction=0.5)
        units = net.assign_output_units([7])
        # zero input gives all-zero activations; top-kappa still returns kappa indices
        plan = build_allocation(net, led, cfg, {7: np.zeros((2, 4))}, 1, units, np.random.default_rng(0))
        np.testing.assert_array_equal(plan.candidates[7][2], [0, 1])

    def test_bad_l_reuse(self):
        net, led = self.setup_reused()
        units = net.assign_output_units([7])
        with pytest.raises(ConstraintError) as e:
            build_allocation(net, led, AllocationConfig(l_reuse=3), {7: np.ones((1, 4))}, 1, units, np.random.default_rng(0))
        assert e.value.rule == "c"

    def test_json_roundtrip(self):
        net, led = self.setup_reused()
        cfg = AllocationConfig(l_reuse=2, density=[0.5] * 3, alloc_fraction=[4 / 6, 2 / 6], candidate_fraction=0.5)
        units = net.assign_output_units([7, 8])
        plan = build_allocation(net, led, cfg, {7: np.ones((2, 4)), 8: -np.ones((2, 4))}, 1, units, np.random.default_rng(0))
        d = json.loads(json.dumps(plan.to_dict()))
        assert AllocationPlan.from_dict(d).to_dict() == plan.to_dict()

    def test_candidates_in_last_layer_ablation(self):
        net, led = self.setup_reused()
        cfg = AllocationConfig(l_reuse=2, density=[0.5] * 3, alloc_fraction=[4 / 6, 3 / 6], candidate_fraction=0.5)
        units = net.assign_output_units([7])
        plan = build_allocation(
            net, led, cfg, {7: np.ones((2, 4))}, 1, units, np.random.default_rng(0), candidates_in_last_layer=True
        )
        assert 3 in plan.candidates[7]
        assert "a" not in plan.rules

    def test_reuse_all(self):
        net, led = self.setup_reused()
        cfg = AllocationConfig(l_reuse=2, density=[0.5] * 3, alloc_fraction=[4 / 6, 3 / 6], candidate_fraction=0.5)
        units = net.assign_output_units([7])
        plan = build_allocation(net, led, cfg, {7: np.ones((2, 4))}, 1, units, np.random.default_rng(0), reuse_all=True)
        assert plan.edge_layers == [3]
        enforce_ambiguity_constraints(plan, led)


class TestConstraints:
    def make(self):
        net = empty_mlp([5, 8, 8, 8, 4], capacity=8)
        led = NeuronLedger.for_network(net)
        cfg = AllocationConfig(l_reuse=2, alloc_fraction=[0.5, 0.5, 0.25], density=[0.5] * 4)
        first_task(net, led, cfg, [0, 1])
        led.fix(2, [np.flatnonzero(led.used_unfixed(2))[0]])
        units = net.assign_output_units([2, 3])
        data = {c: np.random.default_rng(c).normal(size=(4, 5)) for c in (2, 3)}
        plan = build_allocation(net, led, cfg, data, 1, units, np.random.default_rng(1))
        return net, led, plan

    def test_valid_unchanged(self):
        _, led, plan = self.make()
        before = plan.to_dict()
        assert enforce_ambiguity_constraints(plan, led) is plan
        assert plan.to_dict() == before

    def test_edge_into_fixed(self):
        _, led, plan = self.make()
        s, t = plan.edges[2]
        led.fix(3, [t[0]])
        with pytest.raises(ConstraintError) as e:
            enforce_ambiguity_constraints(plan, led)
        assert e.value.rule == "b"

    def test_output_from_candidate(self):
        _, led, plan = self.make()
        s, t = plan.edges[4]
        outsider = np.setdiff1d(np.arange(8), plan.free[4])[0]
        plan.edges[4] = (np.append(s, outsider), np.append(t, t[0]))
        with pytest.raises(ConstraintError) as e:
            enforce_ambiguity_constraints(plan, led)
        assert e.value.rule == "a"

    def test_edge_below_l_reuse(self):
        _, led, plan = self.make()
        plan.edges[1] = (np.array([0]), np.array([0]))
        with pytest.raises(ConstraintError) as e:
            enforce_ambiguity_constraints(plan, led)
        assert e.value.rule == "c"

    def test_last_hidden_not_fixed(self):
        _, led, plan = self.make()
        plan.fix_last_hidden = False
        with pytest.raises(ConstraintError) as e:
            enforce_ambiguity_constraints(plan, led)
        assert e.value.rule == "d"

    def test_targets_exclude_fixed(self):
        _, led, plan = self.make()
        for c in plan.classes:
            for l, tgt in plan.targets[c].items():
                if l + 1 < plan.n_layers:
                    assert not led.fixed(l + 1)[tgt].any()

    def test_never_used_pool_shrinks(self):
        net, led, plan = self.make()
        before = {l: int(led.never_used(l).sum()) for l in led.status}
        apply_plan(net, led, plan, np.random.default_rng(0))
        for l in led.status:
            assert led.never_used(l).sum() <= before[l]
