"""Shared test utilities: independent oracles and random circuit generation.

The oracles deliberately avoid the package's evaluation path: they walk the
node table recursively with plain Python floats and sum over explicit
completions, so agreement with the log-space batch evaluator is meaningful.
"""

from __future__ import annotations

import itertools

import numpy as np

from npcircuit import circuit as pc
from npcircuit.schema import VariableSchema


def direct_eval(circuit: pc.Circuit, full_assignment: dict[int, int]) -> float:
    """Recursive linear-space evaluation of a full assignment."""

    def walk(idx: int) -> float:
        node = circuit.nodes[idx]
        if node.kind == pc.KIND_LEAF:
            return float(node.table[full_assignment[node.var]])
        if node.kind == pc.KIND_PRODUCT:
            out = 1.0
            for c in node.children:
                out *= walk(c)
            return out
        return sum(float(w) * walk(c) for w, c in zip(node.weights, node.children))

    return walk(circuit.root)


def enumeration_oracle(circuit: pc.Circuit, assignment: dict[int, int], marginalized) -> float:
    """Sum of direct full-assignment evaluations over all completions."""
    schema = circuit.schema
    marginalized = sorted(marginalized)
    total = 0.0
    ranges = [range(schema.cardinality(v)) for v in marginalized]
    for combo in itertools.product(*ranges):
        full = dict(assignment)
        full.update(dict(zip(marginalized, combo)))
        total += direct_eval(circuit, full)
    return total


def full_joint_oracle(circuit: pc.Circuit) -> np.ndarray:
    """Dense joint over (attribute tuple index, class) via direct evaluation."""
    schema = circuit.schema
    table = np.zeros((schema.attribute_space_size, schema.class_cardinality))
    for i, a in enumerate(schema.enumerate_attribute_space()):
        for y in range(schema.class_cardinality):
            full = {0: y}
            full.update({k + 1: int(v) for k, v in enumerate(a)})
            table[i, y] = direct_eval(circuit, full)
    return table


def random_circuit(rng: np.random.Generator, max_card: int = 4, max_attrs: int = 4) -> pc.Circuit:
    """Random valid circuit with bounded state space, valid by construction."""
    n_attrs = int(rng.integers(1, max_attrs + 1))
    schema = VariableSchema(
        int(rng.integers(2, max_card + 1)),
        tuple(int(rng.integers(2, max_card + 1)) for _ in range(n_attrs)),
    )
    nodes: list[pc.CircuitNode] = []

    def emit(node):
        nodes.append(node)
        return len(nodes) - 1

    def rand_leaf(var):
        t = rng.dirichlet(np.ones(schema.cardinality(var)))
        return emit(pc.make_leaf(var, t))

    def build(scope: tuple[int, ...], depth: int) -> int:
        if len(scope) == 1:
            return rand_leaf(scope[0])
        if depth <= 0 or rng.random() < 0.3:
            ids = tuple(rand_leaf(v) for v in scope)
            return emit(pc.make_product(ids, scope))
        if rng.random() < 0.5:
            k = int(rng.integers(2, 4))
            ids = tuple(build(scope, depth - 1) for _ in range(k))
            w = rng.dirichlet(np.ones(k))
            return emit(pc.make_sum(ids, w, scope))
        cut = int(rng.integers(1, len(scope)))
        perm = list(scope)
        rng.shuffle(perm)
        left, right = tuple(sorted(perm[:cut])), tuple(sorted(perm[cut:]))
        ids = (build(left, depth - 1), build(right, depth - 1))
        return emit(pc.make_product(ids, scope))

    root = build(tuple(range(schema.n_variables)), depth=3)
    return pc.Circuit(schema=schema, nodes=tuple(nodes), root=root)


def random_query(rng: np.random.Generator, schema: VariableSchema) -> pc.Query:
    assignment = {}
    marginalized = set()
    for var in range(schema.n_variables):
        if rng.random() < 0.5:
            assignment[var] = int(rng.integers(0, schema.cardinality(var)))
        else:
            marginalized.add(var)
    return pc.Query(assignment, frozenset(marginalized))
