"""Integrator tests: node-wise and class-wise inference against explicit
hand-expanded oracles, prediction tie-breaking, and query accounting."""

import itertools

import numpy as np
import pytest

from npcircuit import circuit as pc
from npcircuit import geometry as geo
from npcircuit import integrator as it
from npcircuit.errors import SpaceTooLarge
from npcircuit.recognizer import AttributeProbs
from npcircuit.schema import VariableSchema

from helpers import random_circuit


def small_circuit():
    """K=2, |A_k|=3, |Y|=2 mixture circuit with full dependence."""
    rng = np.random.default_rng(42)
    schema = VariableSchema(2, (3, 3))
    nodes = []
    comps = []
    for _ in range(3):
        ids = []
        for var in range(3):
            nodes.append(pc.make_leaf(var, rng.dirichlet(np.ones(schema.cardinality(var)))))
            ids.append(len(nodes) - 1)
        nodes.append(pc.make_product(tuple(ids), (0, 1, 2)))
        comps.append(len(nodes) - 1)
    nodes.append(pc.make_sum(tuple(comps), rng.dirichlet(np.ones(3)), (0, 1, 2)))
    circuit = pc.Circuit(schema=schema, nodes=tuple(nodes), root=len(nodes) - 1)
    assert pc.validate(circuit).valid
    return circuit


def random_probs(rng, schema):
    return AttributeProbs(
        probs=tuple(rng.dirichlet(np.ones(c)) for c in schema.attribute_cardinalities)
    )


def one_hot_probs(schema, a):
    vecs = []
    for k, c in enumerate(schema.attribute_cardinalities):
        v = np.zeros(c)
        v[a[k]] = 1.0
        vecs.append(v)
    return AttributeProbs(probs=tuple(vecs))


class TestNpcInfer:
    def test_one_hot_probs_reduce_to_conditional(self):
        circuit = small_circuit()
        a = (1, 2)
        scores = it.npc_infer(one_hot_probs(circuit.schema, a), circuit)
        np.testing.assert_allclose(scores.normalized, pc.conditional_class(circuit, a), atol=1e-12)

    def test_independent_circuit_returns_class_marginal(self):
        schema = VariableSchema(3, (2, 2))
        ty = np.array([0.2, 0.5, 0.3])
        nodes = (
            pc.make_leaf(0, ty),
            pc.make_leaf(1, [0.4, 0.6]),
            pc.make_leaf(2, [0.9, 0.1]),
            pc.make_product((0, 1, 2), (0, 1, 2)),
        )
        circuit = pc.Circuit(schema=schema, nodes=nodes, root=3)
        probs = AttributeProbs(probs=(np.full(2, 0.5), np.full(2, 0.5)))
        scores = it.npc_infer(probs, circuit)
        np.testing.assert_allclose(scores.normalized, ty, atol=1e-12)

    def test_matches_hand_enumeration(self):
        rng = np.random.default_rng(3)
        circuit = small_circuit()
        for _ in range(10):
            probs = random_probs(rng, circuit.schema)
            want = np.zeros(2)
            for a in itertools.product(range(3), range(3)):
                weight = probs[0][a[0]] * probs[1][a[1]]
                want += weight * pc.conditional_class(circuit, a)
            scores = it.npc_infer(probs, circuit)
            np.testing.assert_allclose(scores.normalized, want, atol=1e-12)

    def test_mixture_is_normalized_without_rescaling(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            circuit = random_circuit(rng, max_card=3, max_attrs=3)
            probs = random_probs(rng, circuit.schema)
            scores = it.npc_infer(probs, circuit)
            assert float(scores.unnormalized.sum()) == pytest.approx(1.0, abs=1e-9)
            assert scores.partition_value == 1.0

    def test_query_count_is_space_size(self):
        circuit = small_circuit()
        scores = it.npc_infer(one_hot_probs(circuit.schema, (0, 0)), circuit)
        assert scores.counter.circuit_conditional_queries == 9

    def test_space_cap_enforced(self):
        circuit = small_circuit()
        with pytest.raises(SpaceTooLarge):
            it.npc_infer(one_hot_probs(circuit.schema, (0, 0)), circuit, cap=8)

    def test_zero_evidence_nodes_contribute_uniform(self):
        schema = VariableSchema(2, (2,))
        nodes = (
            pc.make_leaf(0, [0.3, 0.7]),
            pc.make_leaf(1, [1.0, 0.0]),
            pc.make_product((0, 1), (0, 1)),
        )
        circuit = pc.Circuit(schema=schema, nodes=nodes, root=2)
        probs = AttributeProbs(probs=(np.array([0.5, 0.5]),))
        scores = it.npc_infer(probs, circuit)
        want = 0.5 * np.array([0.3, 0.7]) + 0.5 * np.array([0.5, 0.5])
        np.testing.assert_allclose(scores.normalized, want, atol=1e-12)


def geometry_fixture():
    schema = VariableSchema(2, (3, 3, 3))
    rows = np.array([(0, 0, 0), (2, 2, 2)] * 60)
    labels = np.array([0, 1] * 60)
    v = geo.build_high_prob_set(rows, schema, gamma=0.1)
    part = geo.partition_by_class(v, rows, labels)
    rng = np.random.default_rng(11)
    nodes = []
    comps = []
    for _ in range(2):
        ids = []
        for var in range(4):
            nodes.append(pc.make_leaf(var, rng.dirichlet(np.ones(schema.cardinality(var)))))
            ids.append(len(nodes) - 1)
        nodes.append(pc.make_product(tuple(ids), (0, 1, 2, 3)))
        comps.append(len(nodes) - 1)
    nodes.append(pc.make_sum(tuple(comps), [0.5, 0.5], (0, 1, 2, 3)))
    circuit = pc.Circuit(schema=schema, nodes=tuple(nodes), root=len(nodes) - 1)
    return circuit, part


class TestRnpcInfer:
    def test_matches_hand_expansion(self):
        circuit, part = geometry_fixture()
        rng = np.random.default_rng(2)
        for _ in range(10):
            probs = random_probs(rng, circuit.schema)
            phi = np.zeros(2)
            z = 0.0
            for y_t in range(2):
                mass = sum(
                    probs[0][a[0]] * probs[1][a[1]] * probs[2][a[2]]
                    for a in part.neighborhoods[y_t]
                )
                contrib = np.zeros(2)
                for a in part.pieces[y_t]:
                    contrib += pc.conditional_class(circuit, a)
                phi += mass * contrib
                z += mass * len(part.pieces[y_t])
            scores = it.rnpc_infer(probs, circuit, part)
            np.testing.assert_allclose(scores.unnormalized, phi, atol=1e-12)
            assert scores.partition_value == pytest.approx(z, abs=1e-12)
            np.testing.assert_allclose(scores.normalized, phi / z, atol=1e-12)

    def test_one_hot_in_piece_hits_single_term(self):
        circuit, part = geometry_fixture()
        probs = one_hot_probs(circuit.schema, (0, 0, 0))
        scores = it.rnpc_infer(probs, circuit, part)
        contrib = pc.conditional_class(circuit, (0, 0, 0))
        np.testing.assert_allclose(scores.normalized, contrib / contrib.sum(), atol=1e-12)

    def test_full_radius_is_input_independent(self):
        # inclusive balls at r = K cover the whole space, every mass is
        # exactly one, and the normalized scores stop depending on the input
        circuit, part = geometry_fixture()
        full = geo.with_radius(part, 3, include_other_pieces=True)
        assert all(len(h) == 27 for h in full.neighborhoods.values())
        rng = np.random.default_rng(5)
        outs = []
        for _ in range(6):
            probs = random_probs(rng, circuit.schema)
            scores = it.rnpc_infer(probs, circuit, full)
            outs.append(scores.normalized)
        for other in outs[1:]:
            assert np.array_equal(outs[0], other)

    def test_strict_full_radius_is_only_approximately_constant(self):
        circuit, part = geometry_fixture()
        strict = geo.with_radius(part, 3)
        assert all(len(h) == 26 for h in strict.neighborhoods.values())

    def test_query_count_is_v_size(self):
        circuit, part = geometry_fixture()
        scores = it.rnpc_infer(one_hot_probs(circuit.schema, (0, 0, 0)), circuit, part)
        assert scores.counter.circuit_conditional_queries == 2
        assert 2 <= circuit.schema.attribute_space_size

    def test_one_hot_agreement_with_node_wise(self):
        # with all recognizer mass on one high-probability node, both
        # procedures reduce to that node's conditional (the pieces here are
        # singletons, so the piece average shares its argmax) and must agree
        circuit, part = geometry_fixture()
        for node in part.all_nodes:
            probs = one_hot_probs(circuit.schema, node)
            npc_pred = it.predict(it.npc_infer(probs, circuit))
            rnpc_pred = it.predict(it.rnpc_infer(probs, circuit, part))
            assert npc_pred == rnpc_pred

    def test_zero_partition_falls_back_to_uniform(self):
        circuit, part = geometry_fixture()
        tiny = AttributeProbs(
            probs=(np.array([0.0, 1.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([0.0, 1.0, 0.0]))
        )
        scores = it.rnpc_infer(tiny, circuit, part, r=0)
        assert scores.uniform_fallback
        np.testing.assert_allclose(scores.normalized, [0.5, 0.5])


class TestPredict:
    def test_argmax(self):
        s = it.ClassScores("npc", np.array([0.1, 0.7, 0.2]), 1.0, np.array([0.1, 0.7, 0.2]))
        assert it.predict(s) == 1

    def test_tie_breaks_to_smallest(self):
        s = it.ClassScores("npc", np.array([0.5, 0.5]), 1.0, np.array([0.5, 0.5]))
        assert it.predict(s) == 0

    def test_rescaling_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            raw = rng.random(5)
            a = it.ClassScores("npc", raw, 1.0, raw / raw.sum())
            b = it.ClassScores("npc", 7.3 * raw, 7.3, (7.3 * raw) / (7.3 * raw.sum()))
            assert it.predict(a) == it.predict(b)


class TestBatchVariants:
    def test_npc_batch_matches_single(self):
        circuit = small_circuit()
        rng = np.random.default_rng(6)
        mats = [rng.dirichlet(np.ones(3), size=8), rng.dirichlet(np.ones(3), size=8)]
        batch = it.npc_infer_batch(mats, circuit)
        for i in range(8):
            single = it.npc_infer(AttributeProbs(probs=(mats[0][i], mats[1][i])), circuit)
            np.testing.assert_allclose(batch[i], single.normalized, atol=1e-12)

    def test_rnpc_batch_matches_single(self):
        circuit, part = geometry_fixture()
        rng = np.random.default_rng(7)
        mats = [rng.dirichlet(np.ones(3), size=8) for _ in range(3)]
        batch, fallback = it.rnpc_infer_batch(mats, circuit, part)
        assert not fallback.any()
        for i in range(8):
            probs = AttributeProbs(probs=tuple(m[i] for m in mats))
            single = it.rnpc_infer(probs, circuit, part)
            np.testing.assert_allclose(batch[i], single.normalized, atol=1e-12)

    def test_scores_csv(self, tmp_path):
        path = tmp_path / "scores.csv"
        it.write_scores_csv(
            path, [0, 1], "npc", [1, 0], [1, 1], np.array([[0.2, 0.8], [0.6, 0.4]])
        )
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "sample_id,mode,predicted,true,score_0,score_1"
        assert lines[1].startswith("0,npc,1,1,")
