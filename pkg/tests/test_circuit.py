"""Circuit engine tests: validation, query evaluation against independent
oracles, conditional queries, and serialization round trips."""

import concurrent.futures

import numpy as np
import pytest

from npcircuit import circuit as pc
from npcircuit.errors import InvalidQuery, ZeroEvidence
from npcircuit.schema import VariableSchema

from helpers import direct_eval, enumeration_oracle, random_circuit, random_query


def single_leaf_circuit():
    schema = VariableSchema(2, (2,))
    nodes = (
        pc.make_leaf(0, [0.5, 0.5]),
        pc.make_leaf(1, [0.3, 0.7]),
        pc.make_product((0, 1), (0, 1)),
    )
    return pc.Circuit(schema=schema, nodes=nodes, root=2)


class TestValidate:
    def test_minimal_valid_circuit(self):
        assert pc.validate(single_leaf_circuit()).valid

    def test_bad_weights_reported(self):
        schema = VariableSchema(2, (2,))
        leaf_a = pc.make_leaf(0, [0.5, 0.5])
        leaf_b = pc.make_leaf(1, [0.5, 0.5])
        prod1 = pc.make_product((0, 1), (0, 1))
        bad = pc.make_sum((2, 2), [0.7, 0.2], (0, 1))
        circuit = pc.Circuit(schema=schema, nodes=(leaf_a, leaf_b, prod1, bad), root=3)
        report = pc.validate(circuit)
        assert not report.valid
        assert any("sum" in v and "not 1" in v for v in report.violations)

    def test_nondisjoint_product_reported(self):
        schema = VariableSchema(2, (2,))
        nodes = (
            pc.make_leaf(1, [0.5, 0.5]),
            pc.make_leaf(1, [0.2, 0.8]),
            pc.make_leaf(0, [0.5, 0.5]),
            pc.make_product((0, 1, 2), (0, 1)),
        )
        circuit = pc.Circuit(schema=schema, nodes=nodes, root=3)
        report = pc.validate(circuit)
        assert any("overlap" in v for v in report.violations)

    def test_smoothness_violation_reported(self):
        schema = VariableSchema(2, (2,))
        nodes = (
            pc.make_leaf(0, [0.5, 0.5]),
            pc.make_leaf(1, [0.5, 0.5]),
            pc.make_sum((0, 1), [0.5, 0.5], (0, 1)),
        )
        circuit = pc.Circuit(schema=schema, nodes=nodes, root=2)
        report = pc.validate(circuit)
        assert any("smoothness" in v for v in report.violations)


class TestEvaluate:
    def test_total_mass_is_one(self):
        circuit = single_leaf_circuit()
        total = pc.evaluate(circuit, pc.Query({}, frozenset({0, 1})))
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_hand_built_two_variable_circuit(self):
        # sum over two products of leaves; expected value expanded by hand:
        # P(y, a) = 0.4 * t0[y] * t1[a] + 0.6 * t2[y] * t3[a]
        schema = VariableSchema(2, (3,))
        t0, t1 = np.array([0.9, 0.1]), np.array([0.2, 0.3, 0.5])
        t2, t3 = np.array([0.25, 0.75]), np.array([0.6, 0.3, 0.1])
        nodes = (
            pc.make_leaf(0, t0),
            pc.make_leaf(1, t1),
            pc.make_product((0, 1), (0, 1)),
            pc.make_leaf(0, t2),
            pc.make_leaf(1, t3),
            pc.make_product((3, 4), (0, 1)),
            pc.make_sum((2, 5), [0.4, 0.6], (0, 1)),
        )
        circuit = pc.Circuit(schema=schema, nodes=nodes, root=6)
        assert pc.validate(circuit).valid
        for y in range(2):
            for a in range(3):
                got = pc.evaluate(circuit, pc.Query({0: y, 1: a}))
                want = 0.4 * t0[y] * t1[a] + 0.6 * t2[y] * t3[a]
                assert got == pytest.approx(want, abs=1e-12)

    def test_partial_assignment_matches_enumeration(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            circuit = random_circuit(rng)
            query = random_query(rng, circuit.schema)
            got = pc.evaluate(circuit, query)
            want = enumeration_oracle(circuit, query.assignment, query.marginalized)
            assert got == pytest.approx(want, abs=1e-9)
            assert -1e-9 <= got <= 1 + 1e-9

    def test_unassigned_variable_rejected(self):
        circuit = single_leaf_circuit()
        with pytest.raises(InvalidQuery):
            pc.evaluate(circuit, pc.Query({0: 1}, frozenset()))

    def test_overlapping_query_rejected(self):
        circuit = single_leaf_circuit()
        with pytest.raises(InvalidQuery):
            pc.evaluate(circuit, pc.Query({0: 1, 1: 0}, frozenset({0})))

    def test_out_of_range_value_rejected(self):
        circuit = single_leaf_circuit()
        with pytest.raises(InvalidQuery):
            pc.evaluate(circuit, pc.Query({0: 5}, frozenset({1})))


class TestConditionalClass:
    def test_independent_circuit_returns_class_marginal(self):
        circuit = single_leaf_circuit()
        for a in range(2):
            np.testing.assert_allclose(pc.conditional_class(circuit, (a,)), [0.5, 0.5])

    def test_matches_bayes_enumeration(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            circuit = random_circuit(rng)
            schema = circuit.schema
            a = tuple(int(rng.integers(0, c)) for c in schema.attribute_cardinalities)
            joint = np.array(
                [
                    direct_eval(circuit, {0: y, **{k + 1: v for k, v in enumerate(a)}})
                    for y in range(schema.class_cardinality)
                ]
            )
            if joint.sum() < 1e-12:
                continue
            got = pc.conditional_class(circuit, a)
            np.testing.assert_allclose(got, joint / joint.sum(), atol=1e-9)
            assert got.sum() == pytest.approx(1.0, abs=1e-9)
            assert np.all(got >= 0)

    def test_deterministic_dataset_concentrates(self):
        from npcircuit.learnspn import fit_parameters_cccp, learn_structure

        schema = VariableSchema(10, (4,))
        rows = np.column_stack([np.full(200, 3), np.full(200, 2)])
        circuit = learn_structure(rows, schema)
        circuit, _ = fit_parameters_cccp(circuit, rows, iters=10)
        cond = pc.conditional_class(circuit, (2,))
        assert np.argmax(cond) == 3
        assert cond.max() >= 0.99

    def test_zero_evidence_raises(self):
        schema = VariableSchema(2, (2,))
        nodes = (
            pc.make_leaf(0, [0.5, 0.5]),
            pc.make_leaf(1, [1.0, 0.0]),
            pc.make_product((0, 1), (0, 1)),
        )
        circuit = pc.Circuit(schema=schema, nodes=nodes, root=2)
        with pytest.raises(ZeroEvidence):
            pc.conditional_class(circuit, (1,))


class TestRandomizedEquivalence:
    def test_queries_match_oracle_on_random_circuits(self):
        rng = np.random.default_rng(23)
        checked = 0
        while checked < 60:
            circuit = random_circuit(rng)
            if circuit.schema.total_state_size > 10**4:
                continue
            assert pc.validate(circuit).valid
            for _ in range(4):
                query = random_query(rng, circuit.schema)
                got = pc.evaluate(circuit, query)
                want = enumeration_oracle(circuit, query.assignment, query.marginalized)
                assert got == pytest.approx(want, abs=1e-9)
            checked += 1


class TestSerialization:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        for _ in range(10):
            circuit = random_circuit(rng)
            path = tmp_path / "c.pc"
            pc.save_circuit(circuit, path)
            loaded = pc.load_circuit(path)
            assert loaded.schema == circuit.schema
            assert loaded.root == circuit.root
            assert len(loaded.nodes) == len(circuit.nodes)
            for a, b in zip(circuit.nodes, loaded.nodes):
                assert a.kind == b.kind
                assert a.scope == b.scope
                assert a.children == b.children
                if a.kind == pc.KIND_LEAF:
                    assert np.array_equal(a.table, b.table)
                elif a.kind == pc.KIND_SUM:
                    assert np.array_equal(a.weights, b.weights)
            # printed decimals reproduce bit-exactly on a second pass
            assert pc.circuit_to_text(circuit) == pc.circuit_to_text(loaded)

    def test_header_enforced(self):
        with pytest.raises(ValueError):
            pc.circuit_from_text("NOPE v9\n")


class TestConcurrentReads:
    def test_threaded_evaluation_matches_serial(self):
        rng = np.random.default_rng(5)
        circuit = random_circuit(rng)
        queries = [random_query(rng, circuit.schema) for _ in range(40)]
        serial = [pc.evaluate(circuit, q) for q in queries]
        with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
            threaded = list(pool.map(lambda q: pc.evaluate(circuit, q), queries))
        assert serial == threaded
